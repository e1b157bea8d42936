//! Wengert tape: reverse-mode differentiation via operation recording.
//!
//! A [`Tape`] owns an arena of value buffers plus an append-only list of
//! recorded operations. [`Tensor`] is a cheap handle (arena index + shape)
//! into one tape. Backward replays the operation list in reverse append
//! order exactly once, accumulating gradients additively at fan-out.
//!
//! One tape serves one forward/backward pass; model parameters live outside
//! and are bound as fresh variables each pass.

use std::cell::RefCell;
use std::rc::Rc;

use super::element::Element;
use super::kernels::{self, Padding};
use super::shape::Shape;
use crate::error::{bail, Result};

pub(crate) struct TapeInner<E: Element> {
    pub(crate) values: Vec<Rc<Vec<E>>>,
    pub(crate) shapes: Vec<Shape>,
    pub(crate) requires_grad: Vec<bool>,
    pub(crate) nodes: Vec<Node<E>>,
    pub(crate) grads: Vec<Option<Vec<E>>>,
    pub(crate) deterministic: bool,
}

pub(crate) struct Node<E: Element> {
    pub(crate) out: usize,
    pub(crate) op: Op<E>,
}

/// Recorded operations. Each arm's backward lives in the `backward_op`
/// dispatch (split across the tensor submodules).
pub(crate) enum Op<E: Element> {
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { a: usize, alpha: E },
    Relu { a: usize },
    Sigmoid { a: usize },
    AddBias { a: usize, bias: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    GatherCaps { a: usize, indices: Rc<Vec<usize>> },
    SumAll { a: usize },
    SumAxis { a: usize, axis: usize },
    Softmax { a: usize, axis: usize },
    CapsNorm { a: usize },
    Squash { a: usize },
    Conv2d { input: usize, kernel: usize, stride: (usize, usize), padding: Padding },
    Conv3d { input: usize, kernel: usize, strides: (usize, usize, usize), padding: Padding },
    ConvTranspose2d { input: usize, kernel: usize, stride: usize, padding: Padding },
    CapsTransform { input: usize, weights: usize, groups: Rc<Vec<usize>> },
    RouteSum { votes: usize, couplings: usize },
    AgreementDot { parents: usize, votes: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<E>, invstd: Vec<E> },
    ChannelAffine { x: usize, scale: Vec<E> },
}

/// Recording tape for one forward/backward pass.
pub struct Tape<E: Element> {
    pub(crate) inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one value on a tape.
pub struct Tensor<E: Element> {
    pub(crate) tape: Tape<E>,
    pub(crate) id: usize,
    pub(crate) shape: Shape,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { tape: self.tape.clone(), id: self.id, shape: self.shape.clone() }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={})", self.id, self.shape)
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                shapes: Vec::new(),
                requires_grad: Vec::new(),
                nodes: Vec::new(),
                grads: Vec::new(),
                deterministic: false,
            })),
        }
    }

    /// A tape whose reductions with a free summation order (routing) use the
    /// canonical order-invariant form.
    pub fn deterministic() -> Self {
        let t = Self::new();
        t.inner.borrow_mut().deterministic = true;
        t
    }

    pub fn is_deterministic(&self) -> bool {
        self.inner.borrow().deterministic
    }

    /// Number of values on the tape (leaves + op outputs).
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_value(&self, data: Vec<E>, shape: Shape, requires_grad: bool) -> Result<Tensor<E>> {
        if data.len() != shape.numel() {
            bail!(ShapeMismatch, "buffer has {} elements but shape {} needs {}", data.len(), shape, shape.numel());
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(Rc::new(data));
        inner.shapes.push(shape.clone());
        inner.requires_grad.push(requires_grad);
        inner.grads.push(None);
        Ok(Tensor { tape: self.clone(), id, shape })
    }

    /// Leaf variable participating in differentiation.
    pub fn var(&self, data: Vec<E>, shape: Shape) -> Result<Tensor<E>> {
        self.push_value(data, shape, true)
    }

    /// Leaf value treated as a constant (gradient still defined, rarely read).
    pub fn constant(&self, data: Vec<E>, shape: Shape) -> Result<Tensor<E>> {
        self.push_value(data, shape, false)
    }

    pub fn scalar(&self, v: E) -> Tensor<E> {
        self.constant(vec![v], Shape::new(vec![1]).expect("static")).expect("scalar")
    }

    pub(crate) fn record(&self, data: Vec<E>, shape: Shape, op: Op<E>) -> Result<Tensor<E>> {
        let out = self.push_value(data, shape, false)?;
        self.inner.borrow_mut().nodes.push(Node { out: out.id, op });
        Ok(out)
    }

    /// Reverse pass from a scalar loss. Gradients of every tape value are
    /// (re)computed; query them through [`Tensor::grad`].
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            bail!(InvalidArgument, "loss tensor belongs to a different tape");
        }
        if loss.shape.numel() != 1 {
            bail!(InvalidArgument, "backward requires a scalar loss, got shape {}", loss.shape);
        }
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        inner.grads[loss.id] = Some(vec![E::one()]);
        for i in (0..inner.nodes.len()).rev() {
            inner.backward_node(i);
        }
        Ok(())
    }
}

impl<E: Element> TapeInner<E> {
    pub(crate) fn ensure_grad(&mut self, id: usize) -> &mut Vec<E> {
        let n = self.values[id].len();
        self.grads[id].get_or_insert_with(|| vec![E::zero(); n])
    }

    fn backward_node(&mut self, node_idx: usize) {
        let out = self.nodes[node_idx].out;
        let dy = match self.grads[out].take() {
            Some(g) => g,
            None => return, // nothing flowed into this value
        };
        // Op is moved out temporarily so input/grad buffers can be borrowed.
        let op = std::mem::replace(&mut self.nodes[node_idx].op, Op::Reshape { a: 0 });
        self.dispatch_backward(&op, out, &dy);
        self.nodes[node_idx].op = op;
        self.grads[out] = Some(dy);
    }

    fn dispatch_backward(&mut self, op: &Op<E>, out: usize, dy: &[E]) {
        match op {
            Op::Add { a, b } => {
                accumulate(self.ensure_grad(*a), dy);
                accumulate(self.ensure_grad(*b), dy);
            }
            Op::Sub { a, b } => {
                accumulate(self.ensure_grad(*a), dy);
                for (g, &d) in self.ensure_grad(*b).iter_mut().zip(dy) {
                    *g = *g - d;
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = Rc::clone(&self.values[a]);
                let bv = Rc::clone(&self.values[b]);
                for (g, (&d, &v)) in self.ensure_grad(a).iter_mut().zip(dy.iter().zip(bv.iter())) {
                    *g = *g + d * v;
                }
                for (g, (&d, &v)) in self.ensure_grad(b).iter_mut().zip(dy.iter().zip(av.iter())) {
                    *g = *g + d * v;
                }
            }
            Op::Affine { a, alpha } => {
                for (g, &d) in self.ensure_grad(*a).iter_mut().zip(dy) {
                    *g = *g + d * *alpha;
                }
            }
            Op::Relu { a } => {
                let av = Rc::clone(&self.values[*a]);
                for (g, (&d, &v)) in self.ensure_grad(*a).iter_mut().zip(dy.iter().zip(av.iter())) {
                    if v > E::zero() {
                        *g = *g + d;
                    }
                }
            }
            Op::Sigmoid { a } => {
                let yv = Rc::clone(&self.values[out]);
                for (g, (&d, &y)) in self.ensure_grad(*a).iter_mut().zip(dy.iter().zip(yv.iter())) {
                    *g = *g + d * y * (E::one() - y);
                }
            }
            Op::AddBias { a, bias } => {
                accumulate(self.ensure_grad(*a), dy);
                let c = self.values[*bias].len();
                let gb = self.ensure_grad(*bias);
                for row in dy.chunks_exact(c) {
                    for (g, &d) in gb.iter_mut().zip(row) {
                        *g = *g + d;
                    }
                }
            }
            Op::Reshape { a } => {
                accumulate(self.ensure_grad(*a), dy);
            }
            Op::SumAll { a } => {
                let d = dy[0];
                for g in self.ensure_grad(*a).iter_mut() {
                    *g = *g + d;
                }
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = split_axis(&self.shapes[*a], *axis);
                let ga = self.ensure_grad(*a);
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            let gi = (o * len + l) * inner + i;
                            ga[gi] = ga[gi] + dy[o * inner + i];
                        }
                    }
                }
            }
            Op::Permute { a, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let out_shape = self.shapes[out].clone();
                let mut dperm = vec![E::zero(); dy.len()];
                permute_copy(dy, &out_shape, &inv, &mut dperm);
                accumulate(self.ensure_grad(*a), &dperm);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shapes[out].clone();
                let (outer, _, inner) = split_axis(&out_shape, *axis);
                let total_axis = out_shape.axis(*axis);
                let mut offset = 0usize;
                let part_ids: Vec<usize> = parts.clone();
                for pid in part_ids {
                    let plen = self.shapes[pid].axis(*axis);
                    let gp = self.ensure_grad(pid);
                    for o in 0..outer {
                        for l in 0..plen {
                            let src = (o * total_axis + offset + l) * inner;
                            let dst = (o * plen + l) * inner;
                            for i in 0..inner {
                                gp[dst + i] = gp[dst + i] + dy[src + i];
                            }
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shapes[*a].clone();
                let (outer, len, inner) = split_axis(&in_shape, *axis);
                let out_len = self.shapes[out].axis(*axis);
                let ga = self.ensure_grad(*a);
                for o in 0..outer {
                    for l in 0..out_len {
                        let dst = (o * len + start + l) * inner;
                        let src = (o * out_len + l) * inner;
                        for i in 0..inner {
                            ga[dst + i] = ga[dst + i] + dy[src + i];
                        }
                    }
                }
            }
            Op::GatherCaps { a, indices } => {
                let d = *self.shapes[*a].dims().last().unwrap();
                let classes = self.shapes[*a].axis(1);
                let ga = self.ensure_grad(*a);
                for (n, &cls) in indices.iter().enumerate() {
                    let dst = (n * classes + cls) * d;
                    let src = n * d;
                    for i in 0..d {
                        ga[dst + i] = ga[dst + i] + dy[src + i];
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&self.shapes[*a], *axis);
                let yv = Rc::clone(&self.values[out]);
                kernels::softmax_mid_axis_backward(&yv, dy, outer, len, inner, self.ensure_grad(*a));
            }
            Op::CapsNorm { a } => {
                let d = *self.shapes[*a].dims().last().unwrap();
                let xv = Rc::clone(&self.values[*a]);
                let nv = Rc::clone(&self.values[out]);
                kernels::norm_rows_backward(&xv, &nv, dy, d, self.ensure_grad(*a));
            }
            Op::Squash { a } => {
                let d = *self.shapes[*a].dims().last().unwrap();
                let xv = Rc::clone(&self.values[*a]);
                kernels::squash_rows_backward(&xv, dy, d, self.ensure_grad(*a));
            }
            Op::ChannelAffine { x, scale } => {
                let c = scale.len();
                let gx = self.ensure_grad(*x);
                for (row_g, row_d) in gx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                    for ((g, &d), &s) in row_g.iter_mut().zip(row_d).zip(scale.iter()) {
                        *g = *g + d * s;
                    }
                }
            }
            Op::Matmul { .. }
            | Op::Conv2d { .. }
            | Op::Conv3d { .. }
            | Op::ConvTranspose2d { .. }
            | Op::CapsTransform { .. }
            | Op::RouteSum { .. }
            | Op::AgreementDot { .. }
            | Op::BatchNorm { .. } => self.backward_heavy(op, out, dy),
        }
    }
}

pub(crate) fn accumulate<E: Element>(grad: &mut [E], dy: &[E]) {
    debug_assert_eq!(grad.len(), dy.len());
    for (g, &d) in grad.iter_mut().zip(dy) {
        *g = *g + d;
    }
}

/// View `shape` as `[outer, shape[axis], inner]`.
pub(crate) fn split_axis(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let dims = shape.dims();
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer.max(1), dims[axis], inner.max(1))
}

pub(crate) fn permute_copy<E: Element>(src: &[E], src_shape: &Shape, axes: &[usize], dst: &mut [E]) {
    let rank = src_shape.rank();
    let src_dims = src_shape.dims();
    let src_strides = src_shape.strides();
    let dst_dims: Vec<usize> = axes.iter().map(|&a| src_dims[a]).collect();
    let mut dst_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        dst_strides[i] = dst_strides[i + 1] * dst_dims[i + 1];
    }
    // walk destination linearly; compute matching source index
    let mut idx = vec![0usize; rank];
    for d in dst.iter_mut() {
        let mut src_off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            src_off += ix * src_strides[axes[i]];
        }
        *d = src[src_off];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < dst_dims[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().requires_grad[self.id]
    }

    /// Snapshot of the value buffer.
    pub fn values(&self) -> Rc<Vec<E>> {
        Rc::clone(&self.tape.inner.borrow().values[self.id])
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.values().as_ref().clone()
    }

    pub fn scalar_value(&self) -> E {
        self.values()[0]
    }

    /// Gradient after [`Tape::backward`]; `None` when no gradient flowed.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    pub fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    pub(crate) fn same_tape(&self, other: &Tensor<E>) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            bail!(InvalidArgument, "tensors belong to different tapes");
        }
        Ok(())
    }

    fn binary_same_shape(&self, other: &Tensor<E>, name: &str, op: fn(usize, usize) -> Op<E>, f: fn(E, E) -> E) -> Result<Tensor<E>> {
        self.same_tape(other)?;
        if self.shape != other.shape {
            let (a, b) = (self.shape.dims(), other.shape.dims());
            let ax = a.iter().zip(b.iter()).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
            bail!(ShapeMismatch, "{name}: axis {ax} differs ({} vs {})", self.shape, other.shape);
        }
        let av = self.values();
        let bv = other.values();
        let data: Vec<E> = av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.record(data, self.shape.clone(), op(self.id, other.id))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_same_shape(other, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_same_shape(other, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_same_shape(other, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    /// `alpha * x + beta`, elementwise.
    pub fn affine(&self, alpha: E, beta: E) -> Result<Tensor<E>> {
        let data: Vec<E> = self.values().iter().map(|&x| alpha * x + beta).collect();
        self.tape.record(data, self.shape.clone(), Op::Affine { a: self.id, alpha })
    }

    pub fn scale(&self, alpha: E) -> Result<Tensor<E>> {
        self.affine(alpha, E::zero())
    }

    pub fn relu(&self) -> Result<Tensor<E>> {
        let data: Vec<E> = self.values().iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect();
        self.tape.record(data, self.shape.clone(), Op::Relu { a: self.id })
    }

    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        let data: Vec<E> = self
            .values()
            .iter()
            .map(|&x| {
                if x >= E::zero() {
                    E::one() / (E::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (E::one() + e)
                }
            })
            .collect();
        self.tape.record(data, self.shape.clone(), Op::Sigmoid { a: self.id })
    }

    /// Broadcast-add `bias` (length = last axis) over all leading axes.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(bias)?;
        let c = *self.shape.dims().last().unwrap();
        if bias.shape.rank() != 1 || bias.shape.axis(0) != c {
            bail!(ShapeMismatch, "add_bias: bias shape {} does not match channel extent {c}", bias.shape);
        }
        let bv = bias.values();
        let mut data = self.to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, &b) in row.iter_mut().zip(bv.iter()) {
                *x = *x + b;
            }
        }
        self.tape.record(data, self.shape.clone(), Op::AddBias { a: self.id, bias: bias.id })
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor<E>> {
        if shape.numel() != self.shape.numel() {
            bail!(ShapeMismatch, "reshape: {} has {} elements, target {} has {}", self.shape, self.shape.numel(), shape, shape.numel());
        }
        // shares the buffer; no copy
        let buf = self.values();
        let mut inner = self.tape.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(buf);
        inner.shapes.push(shape.clone());
        inner.requires_grad.push(false);
        inner.grads.push(None);
        inner.nodes.push(Node { out: id, op: Op::Reshape { a: self.id } });
        Ok(Tensor { tape: self.tape.clone(), id, shape })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.shape.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            bail!(InvalidArgument, "permute: axes {axes:?} is not a permutation of 0..{rank}");
        }
        let dims: Vec<usize> = axes.iter().map(|&a| self.shape.axis(a)).collect();
        let out_shape = Shape::new(dims)?;
        let mut data = vec![E::zero(); self.numel()];
        permute_copy(&self.values(), &self.shape, axes, &mut data);
        self.tape.record(data, out_shape, Op::Permute { a: self.id, axes: axes.to_vec() })
    }

    /// 2-D transpose; plumbing convenience over [`Tensor::permute`].
    pub fn transpose(&self) -> Result<Tensor<E>> {
        if self.shape.rank() != 2 {
            bail!(InvalidArgument, "transpose expects rank 2, got {}", self.shape);
        }
        self.permute(&[1, 0])
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.shape.rank() {
            bail!(InvalidArgument, "slice: axis {axis} out of range for {}", self.shape);
        }
        if start + len > self.shape.axis(axis) || len == 0 {
            bail!(InvalidArgument, "slice: range {start}..{} out of bounds for axis extent {}", start + len, self.shape.axis(axis));
        }
        let (outer, alen, inner) = split_axis(&self.shape, axis);
        let src = self.values();
        let mut data = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let s = (o * alen + start + l) * inner;
                let d = (o * len + l) * inner;
                data[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let mut dims = self.shape.dims().to_vec();
        dims[axis] = len;
        self.tape.record(data, Shape::new(dims)?, Op::Slice { a: self.id, axis, start })
    }

    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let s: E = self.values().iter().copied().sum();
        self.tape.record(vec![s], Shape::new(vec![1])?, Op::SumAll { a: self.id })
    }

    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let n = E::from_usize(self.numel());
        self.sum_all()?.scale(E::one() / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape.rank() {
            bail!(InvalidArgument, "sum_axis: axis {axis} out of range for {}", self.shape);
        }
        if self.shape.rank() == 1 {
            return self.sum_all();
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let src = self.values();
        let mut data = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[(o * len + l) * inner + i];
                }
            }
        }
        let dims: Vec<usize> = self
            .shape
            .dims()
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| (i != axis).then_some(d))
            .collect();
        self.tape.record(data, Shape::new(dims)?, Op::SumAxis { a: self.id, axis })
    }

    /// Numerically stable softmax along `axis`; slices sum to 1.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape.rank() {
            bail!(InvalidArgument, "softmax_axis: axis {axis} out of range for {}", self.shape);
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut data = vec![E::zero(); self.numel()];
        kernels::softmax_mid_axis(&self.values(), outer, len, inner, &mut data);
        self.tape.record(data, self.shape.clone(), Op::Softmax { a: self.id, axis })
    }

    /// Euclidean norm over the last axis: `[..., d] -> [...]`.
    pub fn caps_norm(&self) -> Result<Tensor<E>> {
        if self.shape.rank() < 2 {
            bail!(InvalidArgument, "caps_norm expects rank >= 2, got {}", self.shape);
        }
        let d = *self.shape.dims().last().unwrap();
        let rows = self.numel() / d;
        let mut data = vec![E::zero(); rows];
        kernels::norm_rows(&self.values(), d, &mut data);
        let dims = self.shape.dims()[..self.shape.rank() - 1].to_vec();
        self.tape.record(data, Shape::new(dims)?, Op::CapsNorm { a: self.id })
    }

    /// Squash nonlinearity over the last axis; bounds every vector's norm
    /// below 1 and preserves direction.
    pub fn squash(&self) -> Result<Tensor<E>> {
        let d = *self.shape.dims().last().unwrap();
        let mut data = vec![E::zero(); self.numel()];
        kernels::squash_rows(&self.values(), d, &mut data);
        self.tape.record(data, self.shape.clone(), Op::Squash { a: self.id })
    }

    /// Gather per-sample class capsules: `x: [N, C, d]`, `indices: [N]` -> `[N, d]`.
    pub fn gather_caps(&self, indices: &[usize]) -> Result<Tensor<E>> {
        if self.shape.rank() != 3 {
            bail!(InvalidArgument, "gather_caps expects [N, C, d], got {}", self.shape);
        }
        let (n, c, d) = (self.shape.axis(0), self.shape.axis(1), self.shape.axis(2));
        if indices.len() != n {
            bail!(ShapeMismatch, "gather_caps: {} indices for batch of {n}", indices.len());
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            bail!(InvalidArgument, "gather_caps: class index {bad} out of range 0..{c}");
        }
        let src = self.values();
        let mut data = vec![E::zero(); n * d];
        for (i, &cls) in indices.iter().enumerate() {
            let s = (i * c + cls) * d;
            data[i * d..(i + 1) * d].copy_from_slice(&src[s..s + d]);
        }
        self.tape.record(
            data,
            Shape::new(vec![n, d])?,
            Op::GatherCaps { a: self.id, indices: Rc::new(indices.to_vec()) },
        )
    }
}

/// Concatenate along `axis`; all other axes must agree.
pub fn concat<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    if parts.is_empty() {
        bail!(InvalidArgument, "concat of zero tensors");
    }
    let first = parts[0];
    for p in parts.iter().skip(1) {
        first.same_tape(p)?;
        if p.shape.rank() != first.shape.rank() {
            bail!(ShapeMismatch, "concat: rank {} vs {}", p.shape.rank(), first.shape.rank());
        }
        for ax in 0..first.shape.rank() {
            if ax != axis && p.shape.axis(ax) != first.shape.axis(ax) {
                bail!(ShapeMismatch, "concat: axis {ax} differs ({} vs {})", first.shape, p.shape);
            }
        }
    }
    if axis >= first.shape.rank() {
        bail!(InvalidArgument, "concat: axis {axis} out of range");
    }
    let total: usize = parts.iter().map(|p| p.shape.axis(axis)).sum();
    let mut dims = first.shape.dims().to_vec();
    dims[axis] = total;
    let out_shape = Shape::new(dims)?;
    let (outer, _, inner) = split_axis(&out_shape, axis);
    let mut data = vec![E::zero(); out_shape.numel()];
    let mut offset = 0usize;
    for p in parts {
        let plen = p.shape.axis(axis);
        let pv = p.values();
        for o in 0..outer {
            let src = o * plen * inner;
            let dst = (o * total + offset) * inner;
            data[dst..dst + plen * inner].copy_from_slice(&pv[src..src + plen * inner]);
        }
        offset += plen;
    }
    first.tape.record(
        data,
        out_shape,
        Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis },
    )
}
