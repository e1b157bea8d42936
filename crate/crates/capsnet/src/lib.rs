//! Capsule-network engine.
//!
//! Building blocks, bottom up:
//!
//! - [`tensor`] — dense tensors on a reverse-mode differentiation tape
//!   (convolutions, matmul, softmax, batch norm, squash, gradient checking).
//! - [`routing`] — dynamic routing by agreement between child votes and
//!   parent capsules.
//! - [`caps`] — capsule layers: strided conv-capsule layers, skip-connected
//!   capsule cells, 3-D-convolution vote generation, the class-capsule head.
//! - [`losses`] — margin loss on class-capsule norms plus weighted
//!   reconstruction loss.
//! - [`decoder`] — class-independent reconstruction decoder and
//!   instantiation-parameter analysis (perturbation sweeps, variance ranking).
//! - [`data`] — IDX / CIFAR-10 ingestion, preprocessing, batching.
//! - [`model`], [`train`], [`checkpoint`] — architecture assembly, the
//!   training/evaluation harness, and checkpoint serialization.
//! - [`reference`] — naive loop oracles the fast paths are tested against.
//!
//! The `capsnet` binary exposes the harness as subcommands
//! (`train`, `eval`, `ensemble`, `perturb`, `variance`, `bench`, `inspect`);
//! the crate's `examples/` directory shows direct library usage.

pub mod caps;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod imagegrid;
pub mod losses;
pub mod model;
pub mod params;
pub mod reference;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
