//! Dense n-dimensional tensors with reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; [`Tensor`] handles record forward ops and
//! [`Tape::backward`] replays them in reverse. Ops are verified against the
//! naive references in [`crate::reference`] and by [`grad_check`].

mod conv;
mod element;
mod grad_check;
mod kernels;
mod linalg;
mod shape;
mod tape;

pub use element::Element;
pub use grad_check::grad_check;
pub use kernels::Padding;
pub use shape::Shape;
pub use tape::{concat, Tape, Tensor};

pub(crate) use kernels::{softmax_mid_axis as softmax_mid_axis_raw, squash_rows as squash_rows_raw};
