//! Capsule layers.
//!
//! A capsule grid keeps `n` capsule types of dimension `d` at every spatial
//! location. Convolutional capsule layers run a plain 2-D convolution over
//! the flattened `n*d` channel view and squash per capsule; capsule cells
//! chain such layers with an internal skip connection; the final cell can
//! route votes generated by a 3-D convolution whose depth axis walks whole
//! capsule vectors.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::params::{Bound, ParamId, Params};
use crate::routing::{route, RouteOptions, VoteGrouping, VoteSet};
use crate::tensor::{Element, Padding, Shape, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

/// Capsule grid `[N, H, W, n, d]`.
pub struct CapsuleTensor<E: Element> {
    pub grid: Tensor<E>,
}

impl<E: Element> Clone for CapsuleTensor<E> {
    fn clone(&self) -> Self {
        CapsuleTensor { grid: self.grid.clone() }
    }
}

impl<E: Element> std::fmt::Debug for CapsuleTensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CapsuleTensor({:?})", self.grid)
    }
}

impl<E: Element> CapsuleTensor<E> {
    pub fn new(grid: Tensor<E>) -> Result<Self> {
        if grid.shape().rank() != 5 {
            bail!(ShapeMismatch, "capsule tensor must be [N,H,W,n,d], got {}", grid.shape());
        }
        Ok(CapsuleTensor { grid })
    }

    /// Reinterpret a `[N,H,W,C]` feature map as `n` capsules of dimension `d`
    /// per location (`C = n*d`).
    pub fn from_channels(x: &Tensor<E>, types: usize, dim: usize) -> Result<Self> {
        if x.shape().rank() != 4 {
            bail!(ShapeMismatch, "from_channels expects [N,H,W,C], got {}", x.shape());
        }
        let c = x.shape().axis(3);
        if c != types * dim {
            bail!(ShapeMismatch, "channel axis {c} cannot hold {types} capsules of dimension {dim}");
        }
        let (n, h, w) = (x.shape().axis(0), x.shape().axis(1), x.shape().axis(2));
        Ok(CapsuleTensor { grid: x.reshape(Shape::new(vec![n, h, w, types, dim])?)? })
    }

    /// Flatten the capsule axes back into channels `[N,H,W,n*d]`.
    pub fn to_channels(&self) -> Result<Tensor<E>> {
        let (n, h, w) = (self.batch(), self.height(), self.width());
        let c = self.types() * self.dim();
        self.grid.reshape(Shape::new(vec![n, h, w, c])?)
    }

    pub fn batch(&self) -> usize {
        self.grid.shape().axis(0)
    }
    pub fn height(&self) -> usize {
        self.grid.shape().axis(1)
    }
    pub fn width(&self) -> usize {
        self.grid.shape().axis(2)
    }
    pub fn types(&self) -> usize {
        self.grid.shape().axis(3)
    }
    pub fn dim(&self) -> usize {
        self.grid.shape().axis(4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-pass context: the recording tape, the parameter store (mutable for
/// batch-norm running statistics), and tape-bound parameter tensors.
pub struct Forward<'a, E: Element> {
    pub tape: Tape<E>,
    pub params: &'a mut Params<E>,
    pub bound: Bound<E>,
    pub mode: Mode,
}

impl<'a, E: Element> Forward<'a, E> {
    pub fn new(tape: Tape<E>, params: &'a mut Params<E>, mode: Mode) -> Result<Self> {
        let bound = params.bind(&tape)?;
        Ok(Forward { tape, params, bound, mode })
    }
}

/// Declarative config for one conv-capsule layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsLayerConfig {
    pub kernel: usize,
    pub stride: usize,
    pub types: usize,
    pub dim: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Strided 2-D convolutional capsule layer: reshape capsules to channels,
/// convolve, optionally batch-normalize the channel view, reshape back,
/// squash per capsule.
pub struct ConvCaps2d {
    pub name: String,
    pub in_types: usize,
    pub in_dim: usize,
    pub out_types: usize,
    pub out_dim: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: Padding,
    kernel: ParamId,
    bias: ParamId,
    bn: Option<BnIds>,
}

impl ConvCaps2d {
    pub fn new<E: Element>(
        params: &mut Params<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_types: usize,
        in_dim: usize,
        cfg: &CapsLayerConfig,
    ) -> Result<Self> {
        let cin = in_types * in_dim;
        let cout = cfg.types * cfg.dim;
        let k = cfg.kernel;
        let kernel = params.add_glorot(
            format!("{name}.kernel"),
            Shape::new(vec![k, k, cin, cout])?,
            k * k * cin,
            k * k * cout,
            rng,
        )?;
        let bias = params.add_zeros(format!("{name}.bias"), Shape::new(vec![cout])?, true)?;
        let bn = if cfg.batch_norm {
            Some(BnIds {
                gamma: params.add_const(format!("{name}.bn.gamma"), Shape::new(vec![cout])?, E::one(), true)?,
                beta: params.add_zeros(format!("{name}.bn.beta"), Shape::new(vec![cout])?, true)?,
                running_mean: params.add_zeros(format!("{name}.bn.running_mean"), Shape::new(vec![cout])?, false)?,
                running_var: params.add_const(format!("{name}.bn.running_var"), Shape::new(vec![cout])?, E::one(), false)?,
            })
        } else {
            None
        };
        Ok(ConvCaps2d {
            name: name.to_string(),
            in_types,
            in_dim,
            out_types: cfg.types,
            out_dim: cfg.dim,
            kernel_size: cfg.kernel,
            stride: cfg.stride,
            padding: Padding::Same,
            kernel,
            bias,
            bn,
        })
    }

    /// Convolution + bias + optional batch norm, reshaped to the output
    /// capsule grid but not yet squashed.
    pub fn forward_pre_squash<E: Element>(&self, cx: &mut Forward<E>, x: &CapsuleTensor<E>) -> Result<Tensor<E>> {
        if x.types() != self.in_types || x.dim() != self.in_dim {
            bail!(
                ShapeMismatch,
                "{}: input grid {} has {}x{} capsules but the layer expects {}x{} (n*d channel mismatch)",
                self.name,
                x.grid.shape(),
                x.types(),
                x.dim(),
                self.in_types,
                self.in_dim
            );
        }
        let channels = x.to_channels()?;
        let kernel = cx.bound.get(self.kernel).clone();
        let bias = cx.bound.get(self.bias).clone();
        let mut y = channels.conv2d(&kernel, self.stride, self.padding)?.add_bias(&bias)?;
        if let Some(bn) = &self.bn {
            y = apply_batchnorm(cx, bn, &y)?;
        }
        let (n, oh, ow) = (y.shape().axis(0), y.shape().axis(1), y.shape().axis(2));
        y.reshape(Shape::new(vec![n, oh, ow, self.out_types, self.out_dim])?)
    }

    pub fn forward<E: Element>(&self, cx: &mut Forward<E>, x: &CapsuleTensor<E>) -> Result<CapsuleTensor<E>> {
        let pre = self.forward_pre_squash(cx, x)?;
        CapsuleTensor::new(pre.squash()?)
    }
}

fn apply_batchnorm<E: Element>(cx: &mut Forward<E>, bn: &BnIds, y: &Tensor<E>) -> Result<Tensor<E>> {
    let eps = E::from_f64(BN_EPS);
    match cx.mode {
        Mode::Train => {
            let gamma = cx.bound.get(bn.gamma).clone();
            let beta = cx.bound.get(bn.beta).clone();
            let (out, batch_mean, batch_var) = y.batchnorm_train(&gamma, &beta, eps)?;
            let mom = E::from_f64(BN_MOMENTUM);
            let keep = E::one() - mom;
            {
                let rm = cx.params.data_mut(bn.running_mean);
                for (r, &b) in rm.iter_mut().zip(&batch_mean) {
                    *r = keep * *r + mom * b;
                }
            }
            {
                let rv = cx.params.data_mut(bn.running_var);
                for (r, &b) in rv.iter_mut().zip(&batch_var) {
                    *r = keep * *r + mom * b;
                }
            }
            Ok(out)
        }
        Mode::Infer => {
            let gamma = cx.params.data(bn.gamma).to_vec();
            let beta = cx.params.data(bn.beta).to_vec();
            let rm = cx.params.data(bn.running_mean).to_vec();
            let rv = cx.params.data(bn.running_var).to_vec();
            y.batchnorm_infer(&gamma, &beta, &rm, &rv, eps)
        }
    }
}

/// Generate votes by 3-D convolution over the capsule grid.
///
/// The capsule-type axis becomes the depth axis: the 3-D kernel has depth
/// extent `d` (the child capsule dimension) and depth stride `d`, so each
/// depth step consumes one whole child capsule vector and the same weights
/// slide across child types. Output channels are `m * d'`, one vote vector
/// per parent type. Every vote therefore aggregates the localized
/// `kh x kw` group of child capsules of one type.
///
/// `kernel: [d, kh, kw, 1, m*d']`. Returns votes `[N*H'*W', n, m, d']` with
/// grouping metadata recording the spatial layout.
pub fn vote_conv3d<E: Element>(
    x: &CapsuleTensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    padding: Padding,
    parent_types: usize,
    parent_dim: usize,
) -> Result<VoteSet<E>> {
    let (n, h, w, types, d) = (x.batch(), x.height(), x.width(), x.types(), x.dim());
    let ks = kernel.shape();
    if ks.rank() != 5 || ks.axis(0) != d || ks.axis(3) != 1 || ks.axis(4) != parent_types * parent_dim {
        bail!(
            ShapeMismatch,
            "vote_conv3d: kernel {} inconsistent with child dim {d} and {parent_types}x{parent_dim} parents (want [{d},kh,kw,1,{}])",
            ks,
            parent_types * parent_dim
        );
    }
    let (kh, kw) = (ks.axis(1), ks.axis(2));
    if kh > h || kw > w {
        bail!(ShapeMismatch, "vote_conv3d: kernel {kh}x{kw} exceeds grid {h}x{w}");
    }
    // [N,H,W,n,d] -> [N,n,d,H,W] -> volume [N, n*d, H, W, 1]
    let volume = x
        .grid
        .permute(&[0, 3, 4, 1, 2])?
        .reshape(Shape::new(vec![n, types * d, h, w, 1])?)?;
    // depth stride d: one step per child capsule; depth padding is zero
    // because the extent divides evenly
    let conv = volume.conv3d(kernel, (d, stride, stride), padding)?;
    let (oh, ow) = (conv.shape().axis(2), conv.shape().axis(3));
    debug_assert_eq!(conv.shape().axis(1), types);
    // [N, n, H', W', m*d'] -> [N, H', W', n, m*d'] -> [N*H'*W', n, m, d']
    let votes = conv
        .permute(&[0, 2, 3, 1, 4])?
        .reshape(Shape::new(vec![n * oh * ow, types, parent_types, parent_dim])?)?;
    VoteSet::with_grouping(
        votes,
        VoteGrouping { batch: n, height: oh, width: ow, child_types: types },
    )
}

/// Final-cell layer: 3-D-convolution votes refined by dynamic routing.
pub struct RoutedConvCaps3d {
    pub name: String,
    pub in_types: usize,
    pub in_dim: usize,
    pub out_types: usize,
    pub out_dim: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: Padding,
    pub route_opts: RouteOptions,
    kernel: ParamId,
}

impl RoutedConvCaps3d {
    pub fn new<E: Element>(
        params: &mut Params<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_types: usize,
        in_dim: usize,
        cfg: &CapsLayerConfig,
        route_opts: RouteOptions,
    ) -> Result<Self> {
        let k = cfg.kernel;
        let cout = cfg.types * cfg.dim;
        let kernel = params.add_glorot(
            format!("{name}.vote_kernel"),
            Shape::new(vec![in_dim, k, k, 1, cout])?,
            in_dim * k * k,
            k * k * cout,
            rng,
        )?;
        Ok(RoutedConvCaps3d {
            name: name.to_string(),
            in_types,
            in_dim,
            out_types: cfg.types,
            out_dim: cfg.dim,
            kernel_size: k,
            stride: cfg.stride,
            padding: Padding::Same,
            route_opts,
            kernel,
        })
    }

    pub fn forward<E: Element>(&self, cx: &mut Forward<E>, x: &CapsuleTensor<E>) -> Result<CapsuleTensor<E>> {
        if x.types() != self.in_types || x.dim() != self.in_dim {
            bail!(
                ShapeMismatch,
                "{}: input grid has {}x{} capsules but the layer expects {}x{}",
                self.name,
                x.types(),
                x.dim(),
                self.in_types,
                self.in_dim
            );
        }
        let kernel = cx.bound.get(self.kernel).clone();
        let votes = vote_conv3d(x, &kernel, self.stride, self.padding, self.out_types, self.out_dim)?;
        let grouping = votes.grouping.expect("vote_conv3d sets grouping");
        let parents = route(&votes, &self.route_opts)?;
        let grid = parents.reshape(Shape::new(vec![
            grouping.batch,
            grouping.height,
            grouping.width,
            self.out_types,
            self.out_dim,
        ])?)?;
        CapsuleTensor::new(grid)
    }
}

/// Declarative config for a capsule cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub layers: Vec<CapsLayerConfig>,
    /// Index of the layer whose (squashed) output is added to the final
    /// layer's output before the final squash.
    pub skip_from: usize,
    /// Route the final layer's 3-D-convolution votes instead of using a
    /// plain convolution.
    #[serde(default)]
    pub routed: bool,
    #[serde(default = "default_routing_iterations")]
    pub routing_iterations: usize,
}

fn default_routing_iterations() -> usize {
    3
}

/// A block of conv-capsule layers with one internal skip connection.
/// The skip source is added to the final layer's pre-squash output and the
/// sum is squashed.
pub struct CapsuleCell {
    pub name: String,
    layers: Vec<ConvCaps2d>,
    routed_final: Option<RoutedConvCaps3d>,
    pub skip_from: usize,
}

impl CapsuleCell {
    pub fn new<E: Element>(
        params: &mut Params<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_types: usize,
        in_dim: usize,
        cfg: &CellConfig,
        route_opts: RouteOptions,
    ) -> Result<Self> {
        if cfg.layers.len() < 2 {
            bail!(Config, "cell {name}: needs at least 2 layers (got {})", cfg.layers.len());
        }
        if cfg.skip_from + 1 >= cfg.layers.len() {
            bail!(Config, "cell {name}: invalid skip index {} for {} layers", cfg.skip_from, cfg.layers.len());
        }
        let mut layers = Vec::new();
        let (mut t, mut d) = (in_types, in_dim);
        let plain_count = if cfg.routed { cfg.layers.len() - 1 } else { cfg.layers.len() };
        for (i, lc) in cfg.layers.iter().take(plain_count).enumerate() {
            let layer = ConvCaps2d::new(params, rng, &format!("{name}.l{i}"), t, d, lc)?;
            t = lc.types;
            d = lc.dim;
            layers.push(layer);
        }
        let routed_final = if cfg.routed {
            let lc = cfg.layers.last().expect("len >= 2");
            let opts = RouteOptions { iterations: cfg.routing_iterations, ..route_opts };
            Some(RoutedConvCaps3d::new(
                params,
                rng,
                &format!("{name}.l{}", cfg.layers.len() - 1),
                t,
                d,
                lc,
                opts,
            )?)
        } else {
            None
        };
        Ok(CapsuleCell { name: name.to_string(), layers, routed_final, skip_from: cfg.skip_from })
    }

    pub fn out_types_dim(&self) -> (usize, usize) {
        match &self.routed_final {
            Some(r) => (r.out_types, r.out_dim),
            None => {
                let l = self.layers.last().expect("non-empty");
                (l.out_types, l.out_dim)
            }
        }
    }

    pub fn forward<E: Element>(&self, cx: &mut Forward<E>, x: &CapsuleTensor<E>) -> Result<CapsuleTensor<E>> {
        let mut outs: Vec<CapsuleTensor<E>> = Vec::new();
        let mut cur = x.clone();
        let non_final_plain = if self.routed_final.is_some() { self.layers.len() } else { self.layers.len() - 1 };
        for layer in &self.layers[..non_final_plain] {
            cur = layer.forward(cx, &cur)?;
            outs.push(cur.clone());
        }
        let final_pre = match &self.routed_final {
            Some(routed) => routed.forward(cx, &cur)?.grid,
            None => self.layers.last().expect("non-empty").forward_pre_squash(cx, &cur)?,
        };
        let skip = &outs[self.skip_from];
        if skip.grid.shape() != final_pre.shape() {
            bail!(
                ShapeMismatch,
                "cell {}: skip source shape {} does not match final layer output {}",
                self.name,
                skip.grid.shape(),
                final_pre.shape()
            );
        }
        CapsuleTensor::new(final_pre.add(&skip.grid)?.squash()?)
    }
}

/// Flatten a capsule grid into a capsule list `[N, H*W*n, d]`, row-major in
/// (h, then w, then type). The inverse is [`unflatten_caps`].
pub fn flatten_caps<E: Element>(x: &CapsuleTensor<E>) -> Result<Tensor<E>> {
    let (n, h, w, t, d) = (x.batch(), x.height(), x.width(), x.types(), x.dim());
    x.grid.reshape(Shape::new(vec![n, h * w * t, d])?)
}

/// Inverse of [`flatten_caps`] for a known grid layout.
pub fn unflatten_caps<E: Element>(list: &Tensor<E>, h: usize, w: usize, types: usize) -> Result<CapsuleTensor<E>> {
    if list.shape().rank() != 3 {
        bail!(ShapeMismatch, "unflatten_caps expects [N,K,d], got {}", list.shape());
    }
    let (n, k, d) = (list.shape().axis(0), list.shape().axis(1), list.shape().axis(2));
    if k != h * w * types {
        bail!(ShapeMismatch, "unflatten_caps: {k} capsules do not tile {h}x{w}x{types}");
    }
    CapsuleTensor::new(list.reshape(Shape::new(vec![n, h, w, types, d])?)?)
}

/// Final capsule layer: one vote per (input capsule, class) via learned
/// transforms, combined by dynamic routing. The per-class activity-vector
/// norm is the class confidence.
pub struct ClassCaps {
    pub name: String,
    pub in_caps: usize,
    pub in_dim: usize,
    pub classes: usize,
    pub out_dim: usize,
    pub route_opts: RouteOptions,
    transforms: ParamId,
    groups: Vec<usize>,
}

impl ClassCaps {
    /// Routing options used by class capsules unless overridden: couplings
    /// normalized over the child axis, so a single input capsule's coupling
    /// to every class is forced to 1.
    pub fn default_route_options(iterations: usize) -> RouteOptions {
        RouteOptions { iterations, full_grad: false, softmax_over_children: true }
    }

    /// `groups` maps each input capsule to its transform group; `None` gives
    /// every input capsule its own transform.
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        params: &mut Params<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_caps: usize,
        in_dim: usize,
        classes: usize,
        out_dim: usize,
        iterations: usize,
        groups: Option<Vec<usize>>,
    ) -> Result<Self> {
        Self::with_options(
            params,
            rng,
            name,
            in_caps,
            in_dim,
            classes,
            out_dim,
            Self::default_route_options(iterations),
            groups,
        )
    }

    /// Full control over the routing options (softmax axis, gradient mode).
    #[allow(clippy::too_many_arguments)]
    pub fn with_options<E: Element>(
        params: &mut Params<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_caps: usize,
        in_dim: usize,
        classes: usize,
        out_dim: usize,
        route_opts: RouteOptions,
        groups: Option<Vec<usize>>,
    ) -> Result<Self> {
        if route_opts.iterations < 1 {
            bail!(InvalidArgument, "class caps {name}: routing iterations must be >= 1");
        }
        let groups = match groups {
            Some(g) => {
                if g.len() != in_caps {
                    bail!(ShapeMismatch, "class caps {name}: {} group entries for {in_caps} capsules", g.len());
                }
                g
            }
            None => (0..in_caps).collect(),
        };
        let n_groups = groups.iter().copied().max().map(|m| m + 1).unwrap_or(0);
        let transforms = params.add_glorot(
            format!("{name}.transforms"),
            Shape::new(vec![n_groups, classes, in_dim, out_dim])?,
            in_dim,
            out_dim,
            rng,
        )?;
        Ok(ClassCaps {
            name: name.to_string(),
            in_caps,
            in_dim,
            classes,
            out_dim,
            route_opts,
            transforms,
            groups,
        })
    }

    /// `x: [N, K, d]` -> class capsules `[N, C, d']`.
    pub fn forward<E: Element>(&self, cx: &mut Forward<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.shape().rank() != 3 || x.shape().axis(1) != self.in_caps || x.shape().axis(2) != self.in_dim {
            bail!(
                ShapeMismatch,
                "{}: expected capsule list [N,{},{}], got {}",
                self.name,
                self.in_caps,
                self.in_dim,
                x.shape()
            );
        }
        let w = cx.bound.get(self.transforms).clone();
        let votes = x.caps_transform(&w, &self.groups)?;
        let vote_set = VoteSet::new(votes)?;
        route(&vote_set, &self.route_opts)
    }
}

#[cfg(test)]
mod tests;
