//! Dense linear-algebra ops plus the capsule-specific contractions
//! (vote transforms, routing weighted sums, agreement dot products) and
//! batch normalization.

use rayon::prelude::*;
use std::rc::Rc;

use super::element::Element;
use super::kernels;
use super::shape::Shape;
use super::tape::{accumulate, Op, TapeInner, Tensor};
use crate::error::{bail, Result};

const GRAD_CHUNK: usize = 8;

impl<E: Element> Tensor<E> {
    /// Matrix product of row-major 2-D tensors: `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(other)?;
        if self.shape.rank() != 2 || other.shape.rank() != 2 {
            bail!(ShapeMismatch, "matmul: expected rank-2 operands, got {} and {}", self.shape, other.shape);
        }
        let (m, k) = (self.shape.axis(0), self.shape.axis(1));
        let (k2, n) = (other.shape.axis(0), other.shape.axis(1));
        if k != k2 {
            bail!(ShapeMismatch, "matmul: inner axes differ ({k} vs {k2})");
        }
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_nn(m, k, n, &self.values(), &other.values(), &mut out);
        self.tape.record(out, Shape::new(vec![m, n])?, Op::Matmul { a: self.id, b: other.id, m, k, n })
    }

    /// Per-capsule vote transform. `self: [N, K, d]`, `weights: [G, C, d, d']`,
    /// `groups[k]` maps child `k` to its weight group -> votes `[N, K, C, d']`.
    pub fn caps_transform(&self, weights: &Tensor<E>, groups: &[usize]) -> Result<Tensor<E>> {
        self.same_tape(weights)?;
        if self.shape.rank() != 3 {
            bail!(ShapeMismatch, "caps_transform: input must be [N,K,d], got {}", self.shape);
        }
        if weights.shape.rank() != 4 {
            bail!(ShapeMismatch, "caps_transform: weights must be [G,C,d,d'], got {}", weights.shape);
        }
        let (n, k, d) = (self.shape.axis(0), self.shape.axis(1), self.shape.axis(2));
        let (g, c, wd, dp) = (
            weights.shape.axis(0),
            weights.shape.axis(1),
            weights.shape.axis(2),
            weights.shape.axis(3),
        );
        if wd != d {
            bail!(ShapeMismatch, "caps_transform: capsule dim {d} vs weight dim {wd}");
        }
        if groups.len() != k {
            bail!(ShapeMismatch, "caps_transform: {} group entries for {k} children", groups.len());
        }
        if let Some(&bad) = groups.iter().find(|&&x| x >= g) {
            bail!(InvalidArgument, "caps_transform: group index {bad} out of range 0..{g}");
        }
        let x_rc = self.values();
        let x: &[E] = &x_rc;
        let w_rc = weights.values();
        let w: &[E] = &w_rc;
        let mut out = vec![E::zero(); n * k * c * dp];
        out.par_chunks_exact_mut(c * dp)
            .enumerate()
            .for_each(|(row, o)| {
                let ki = row % k;
                let xr = &x[row * d..(row + 1) * d];
                let wg = &w[groups[ki] * c * d * dp..(groups[ki] + 1) * c * d * dp];
                for ci in 0..c {
                    let wc = &wg[ci * d * dp..(ci + 1) * d * dp];
                    let oc = &mut o[ci * dp..(ci + 1) * dp];
                    for (j, &xj) in xr.iter().enumerate() {
                        let wrow = &wc[j * dp..(j + 1) * dp];
                        for (ov, &wv) in oc.iter_mut().zip(wrow) {
                            *ov = *ov + xj * wv;
                        }
                    }
                }
            });
        self.tape.record(
            out,
            Shape::new(vec![n, k, c, dp])?,
            Op::CapsTransform { input: self.id, weights: weights.id, groups: Rc::new(groups.to_vec()) },
        )
    }

    /// Coupling-weighted vote sum: `votes: [B, K, M, d']` combined with
    /// `couplings: [B, K, M]` -> parents `[B, M, d']`.
    ///
    /// On a deterministic tape the per-parent sum over children uses the
    /// canonical (value-sorted) order, making the result exactly invariant
    /// under permutations of the child axis.
    pub fn route_sum(&self, couplings: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(couplings)?;
        if self.shape.rank() != 4 {
            bail!(ShapeMismatch, "route_sum: votes must be [B,K,M,d'], got {}", self.shape);
        }
        let (b, k, m, dp) = (self.shape.axis(0), self.shape.axis(1), self.shape.axis(2), self.shape.axis(3));
        if couplings.shape.dims() != [b, k, m] {
            bail!(ShapeMismatch, "route_sum: couplings {} do not match votes {}", couplings.shape, self.shape);
        }
        let canonical = self.tape.is_deterministic();
        let votes_rc = self.values();
        let votes: &[E] = &votes_rc;
        let coup_rc = couplings.values();
        let coup: &[E] = &coup_rc;
        let mut out = vec![E::zero(); b * m * dp];
        out.par_chunks_exact_mut(m * dp)
            .enumerate()
            .for_each(|(bi, ob)| {
                let vb = &votes[bi * k * m * dp..(bi + 1) * k * m * dp];
                let cb = &coup[bi * k * m..(bi + 1) * k * m];
                if canonical {
                    let mut terms = vec![E::zero(); k];
                    for mi in 0..m {
                        for di in 0..dp {
                            for ki in 0..k {
                                terms[ki] = cb[ki * m + mi] * vb[(ki * m + mi) * dp + di];
                            }
                            terms.sort_unstable_by(|a, b| a.total_cmp(b));
                            ob[mi * dp + di] = terms.iter().copied().sum();
                        }
                    }
                } else {
                    for ki in 0..k {
                        for mi in 0..m {
                            let cv = cb[ki * m + mi];
                            let vr = &vb[(ki * m + mi) * dp..(ki * m + mi + 1) * dp];
                            let or = &mut ob[mi * dp..(mi + 1) * dp];
                            for (o, &v) in or.iter_mut().zip(vr) {
                                *o = *o + cv * v;
                            }
                        }
                    }
                }
            });
        self.tape.record(
            out,
            Shape::new(vec![b, m, dp])?,
            Op::RouteSum { votes: self.id, couplings: couplings.id },
        )
    }

    /// Agreement between parent outputs and child votes:
    /// `self (parents): [B, M, d']`, `votes: [B, K, M, d']` -> `[B, K, M]`
    /// where each entry is the dot product over d'.
    pub fn agreement_dot(&self, votes: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_tape(votes)?;
        if self.shape.rank() != 3 || votes.shape.rank() != 4 {
            bail!(ShapeMismatch, "agreement_dot: parents must be [B,M,d'] and votes [B,K,M,d'], got {} and {}", self.shape, votes.shape);
        }
        let (b, m, dp) = (self.shape.axis(0), self.shape.axis(1), self.shape.axis(2));
        let (vb, k, vm, vdp) = (votes.shape.axis(0), votes.shape.axis(1), votes.shape.axis(2), votes.shape.axis(3));
        if (vb, vm, vdp) != (b, m, dp) {
            bail!(ShapeMismatch, "agreement_dot: parents {} vs votes {}", self.shape, votes.shape);
        }
        let pv_rc = self.values();
        let pv: &[E] = &pv_rc;
        let vv_rc = votes.values();
        let vv: &[E] = &vv_rc;
        let mut out = vec![E::zero(); b * k * m];
        out.par_chunks_exact_mut(k * m)
            .enumerate()
            .for_each(|(bi, ob)| {
                let pb = &pv[bi * m * dp..(bi + 1) * m * dp];
                let vbs = &vv[bi * k * m * dp..(bi + 1) * k * m * dp];
                for ki in 0..k {
                    for mi in 0..m {
                        let vr = &vbs[(ki * m + mi) * dp..(ki * m + mi + 1) * dp];
                        let pr = &pb[mi * dp..(mi + 1) * dp];
                        let mut acc = E::zero();
                        for (a, b) in vr.iter().zip(pr) {
                            acc = acc + *a * *b;
                        }
                        ob[ki * m + mi] = acc;
                    }
                }
            });
        self.tape.record(out, Shape::new(vec![b, k, m])?, Op::AgreementDot { parents: self.id, votes: votes.id })
    }

    /// Batch normalization over all leading axes, channels = last axis.
    /// Returns the normalized tensor plus the biased batch mean and the
    /// unbiased batch variance for running-stat updates.
    pub fn batchnorm_train(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Result<(Tensor<E>, Vec<E>, Vec<E>)> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let c = *self.shape.dims().last().unwrap();
        if gamma.shape.dims() != [c] || beta.shape.dims() != [c] {
            bail!(ShapeMismatch, "batchnorm: gamma {} / beta {} must both be [{c}]", gamma.shape, beta.shape);
        }
        let rows = self.numel() / c;
        if rows < 1 {
            bail!(InvalidArgument, "batchnorm: empty batch");
        }
        let x = self.values();
        let m = E::from_usize(rows);
        let mut mean = vec![E::zero(); c];
        for row in x.chunks_exact(c) {
            for (mu, &v) in mean.iter_mut().zip(row) {
                *mu = *mu + v;
            }
        }
        for mu in mean.iter_mut() {
            *mu = *mu / m;
        }
        let mut var = vec![E::zero(); c];
        for row in x.chunks_exact(c) {
            for ((vv, &v), &mu) in var.iter_mut().zip(row).zip(mean.iter()) {
                let d = v - mu;
                *vv = *vv + d * d;
            }
        }
        for vv in var.iter_mut() {
            *vv = *vv / m;
        }
        let invstd: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let gv = gamma.values();
        let bv = beta.values();
        let mut out = vec![E::zero(); self.numel()];
        for (orow, xrow) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
            for i in 0..c {
                let xhat = (xrow[i] - mean[i]) * invstd[i];
                orow[i] = gv[i] * xhat + bv[i];
            }
        }
        let var_unbiased: Vec<E> = if rows > 1 {
            let f = m / (m - E::one());
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        let t = self.tape.record(
            out,
            self.shape.clone(),
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, mean: mean.clone(), invstd },
        )?;
        Ok((t, mean, var_unbiased))
    }

    /// Inference-mode batch normalization: per-channel affine computed from
    /// running statistics. Differentiable with respect to the input only.
    pub fn batchnorm_infer(&self, gamma: &[E], beta: &[E], running_mean: &[E], running_var: &[E], eps: E) -> Result<Tensor<E>> {
        let c = *self.shape.dims().last().unwrap();
        if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
            bail!(ShapeMismatch, "batchnorm_infer: parameter length does not match channel extent {c}");
        }
        let scale: Vec<E> = gamma
            .iter()
            .zip(running_var)
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift: Vec<E> = beta
            .iter()
            .zip(running_mean.iter().zip(scale.iter()))
            .map(|(&b, (&m, &s))| b - m * s)
            .collect();
        let x = self.values();
        let mut out = vec![E::zero(); self.numel()];
        for (orow, xrow) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
            for i in 0..c {
                orow[i] = scale[i] * xrow[i] + shift[i];
            }
        }
        self.tape.record(out, self.shape.clone(), Op::ChannelAffine { x: self.id, scale })
    }
}

impl<E: Element> TapeInner<E> {
    pub(crate) fn backward_heavy(&mut self, op: &Op<E>, out: usize, dy: &[E]) {
        match op {
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = Rc::clone(&self.values[*a]);
                let bv = Rc::clone(&self.values[*b]);
                {
                    let mut d_a = vec![E::zero(); m * k];
                    kernels::matmul_nt(m, n, k, dy, &bv, &mut d_a);
                    accumulate(self.ensure_grad(*a), &d_a);
                }
                {
                    let g_b = self.ensure_grad(*b);
                    kernels::matmul_tn_acc(k, m, n, &av, dy, g_b);
                }
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                self.backward_conv2d(*input, *kernel, *stride, *padding, out, dy);
            }
            Op::Conv3d { input, kernel, strides, padding } => {
                self.backward_conv3d(*input, *kernel, *strides, *padding, out, dy);
            }
            Op::ConvTranspose2d { input, kernel, stride, padding } => {
                self.backward_conv_transpose2d(*input, *kernel, *stride, *padding, out, dy);
            }
            Op::CapsTransform { input, weights, groups } => {
                self.backward_caps_transform(*input, *weights, groups, out, dy);
            }
            Op::RouteSum { votes, couplings } => {
                self.backward_route_sum(*votes, *couplings, dy);
            }
            Op::AgreementDot { parents, votes } => {
                self.backward_agreement_dot(*parents, *votes, dy);
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd } => {
                self.backward_batchnorm(*x, *gamma, *beta, mean, invstd, dy);
            }
            _ => unreachable!("non-heavy op dispatched to backward_heavy"),
        }
    }

    fn backward_caps_transform(&mut self, input: usize, weights: usize, groups: &Rc<Vec<usize>>, out: usize, dy: &[E]) {
        let (n, k, d) = (
            self.shapes[input].axis(0),
            self.shapes[input].axis(1),
            self.shapes[input].axis(2),
        );
        let (g, c, dp) = (
            self.shapes[weights].axis(0),
            self.shapes[weights].axis(1),
            self.shapes[weights].axis(3),
        );
        let _ = self.shapes[out].rank();
        let x_rc = Rc::clone(&self.values[input]);
        let x: &[E] = &x_rc;
        let w_rc = Rc::clone(&self.values[weights]);
        let w: &[E] = &w_rc;
        let groups: &[usize] = groups;

        {
            let g_in = self.ensure_grad(input);
            g_in.par_chunks_exact_mut(d)
                .enumerate()
                .for_each(|(row, gi)| {
                    let ki = row % k;
                    let wg = &w[groups[ki] * c * d * dp..(groups[ki] + 1) * c * d * dp];
                    let dyr = &dy[row * c * dp..(row + 1) * c * dp];
                    for ci in 0..c {
                        let wc = &wg[ci * d * dp..(ci + 1) * d * dp];
                        let dc = &dyr[ci * dp..(ci + 1) * dp];
                        for j in 0..d {
                            let wrow = &wc[j * dp..(j + 1) * dp];
                            let mut acc = E::zero();
                            for (wv, dv) in wrow.iter().zip(dc) {
                                acc = acc + *wv * *dv;
                            }
                            gi[j] = gi[j] + acc;
                        }
                    }
                });
        }

        let wsize = g * c * d * dp;
        let partials: Vec<Vec<E>> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let lo = chunk * GRAD_CHUNK;
                let hi = (lo + GRAD_CHUNK).min(n);
                let mut dw = vec![E::zero(); wsize];
                for ni in lo..hi {
                    for ki in 0..k {
                        let row = ni * k + ki;
                        let xr = &x[row * d..(row + 1) * d];
                        let dyr = &dy[row * c * dp..(row + 1) * c * dp];
                        let wg = &mut dw[groups[ki] * c * d * dp..(groups[ki] + 1) * c * d * dp];
                        for ci in 0..c {
                            let dc = &dyr[ci * dp..(ci + 1) * dp];
                            let wc = &mut wg[ci * d * dp..(ci + 1) * d * dp];
                            for (j, &xj) in xr.iter().enumerate() {
                                let wrow = &mut wc[j * dp..(j + 1) * dp];
                                for (wv, &dv) in wrow.iter_mut().zip(dc) {
                                    *wv = *wv + xj * dv;
                                }
                            }
                        }
                    }
                }
                dw
            })
            .collect();
        let g_w = self.ensure_grad(weights);
        for p in &partials {
            accumulate(g_w, p);
        }
    }

    fn backward_route_sum(&mut self, votes: usize, couplings: usize, dy: &[E]) {
        let (_b, k, m, dp) = (
            self.shapes[votes].axis(0),
            self.shapes[votes].axis(1),
            self.shapes[votes].axis(2),
            self.shapes[votes].axis(3),
        );
        let vv_rc = Rc::clone(&self.values[votes]);
        let vv: &[E] = &vv_rc;
        let cv_rc = Rc::clone(&self.values[couplings]);
        let cv: &[E] = &cv_rc;
        {
            let g_votes = self.ensure_grad(votes);
            g_votes
                .par_chunks_exact_mut(k * m * dp)
                .enumerate()
                .for_each(|(bi, gv)| {
                    let cb = &cv[bi * k * m..(bi + 1) * k * m];
                    let dyb = &dy[bi * m * dp..(bi + 1) * m * dp];
                    for ki in 0..k {
                        for mi in 0..m {
                            let cvl = cb[ki * m + mi];
                            let gr = &mut gv[(ki * m + mi) * dp..(ki * m + mi + 1) * dp];
                            let dr = &dyb[mi * dp..(mi + 1) * dp];
                            for (gx, &dv) in gr.iter_mut().zip(dr) {
                                *gx = *gx + cvl * dv;
                            }
                        }
                    }
                });
        }
        {
            let g_c = self.ensure_grad(couplings);
            g_c.par_chunks_exact_mut(k * m)
                .enumerate()
                .for_each(|(bi, gc)| {
                    let vb = &vv[bi * k * m * dp..(bi + 1) * k * m * dp];
                    let dyb = &dy[bi * m * dp..(bi + 1) * m * dp];
                    for ki in 0..k {
                        for mi in 0..m {
                            let vr = &vb[(ki * m + mi) * dp..(ki * m + mi + 1) * dp];
                            let dr = &dyb[mi * dp..(mi + 1) * dp];
                            let mut acc = E::zero();
                            for (a, b) in vr.iter().zip(dr) {
                                acc = acc + *a * *b;
                            }
                            gc[ki * m + mi] = gc[ki * m + mi] + acc;
                        }
                    }
                });
        }
    }

    fn backward_agreement_dot(&mut self, parents: usize, votes: usize, dy: &[E]) {
        let (_b, k, m, dp) = (
            self.shapes[votes].axis(0),
            self.shapes[votes].axis(1),
            self.shapes[votes].axis(2),
            self.shapes[votes].axis(3),
        );
        let pv_rc = Rc::clone(&self.values[parents]);
        let pv: &[E] = &pv_rc;
        let vv_rc = Rc::clone(&self.values[votes]);
        let vv: &[E] = &vv_rc;
        {
            let g_p = self.ensure_grad(parents);
            g_p.par_chunks_exact_mut(m * dp)
                .enumerate()
                .for_each(|(bi, gp)| {
                    let vb = &vv[bi * k * m * dp..(bi + 1) * k * m * dp];
                    let dyb = &dy[bi * k * m..(bi + 1) * k * m];
                    for ki in 0..k {
                        for mi in 0..m {
                            let dv = dyb[ki * m + mi];
                            let vr = &vb[(ki * m + mi) * dp..(ki * m + mi + 1) * dp];
                            let gr = &mut gp[mi * dp..(mi + 1) * dp];
                            for (g, &v) in gr.iter_mut().zip(vr) {
                                *g = *g + dv * v;
                            }
                        }
                    }
                });
        }
        {
            let g_v = self.ensure_grad(votes);
            g_v.par_chunks_exact_mut(k * m * dp)
                .enumerate()
                .for_each(|(bi, gv)| {
                    let pb = &pv[bi * m * dp..(bi + 1) * m * dp];
                    let dyb = &dy[bi * k * m..(bi + 1) * k * m];
                    for ki in 0..k {
                        for mi in 0..m {
                            let dv = dyb[ki * m + mi];
                            let pr = &pb[mi * dp..(mi + 1) * dp];
                            let gr = &mut gv[(ki * m + mi) * dp..(ki * m + mi + 1) * dp];
                            for (g, &p) in gr.iter_mut().zip(pr) {
                                *g = *g + dv * p;
                            }
                        }
                    }
                });
        }
    }

    fn backward_batchnorm(&mut self, x: usize, gamma: usize, beta: usize, mean: &[E], invstd: &[E], dy: &[E]) {
        let c = mean.len();
        let rows = self.values[x].len() / c;
        let m = E::from_usize(rows);
        let xv = Rc::clone(&self.values[x]);
        let gv = Rc::clone(&self.values[gamma]);

        // accumulate per-channel sums in fixed row order
        let mut sum_dy = vec![E::zero(); c];
        let mut sum_dy_xhat = vec![E::zero(); c];
        for (r, dyr) in dy.chunks_exact(c).enumerate() {
            let xr = &xv[r * c..(r + 1) * c];
            for i in 0..c {
                let xhat = (xr[i] - mean[i]) * invstd[i];
                sum_dy[i] = sum_dy[i] + dyr[i];
                sum_dy_xhat[i] = sum_dy_xhat[i] + dyr[i] * xhat;
            }
        }
        {
            let g_x = self.ensure_grad(x);
            for (r, gxr) in g_x.chunks_exact_mut(c).enumerate() {
                let xr = &xv[r * c..(r + 1) * c];
                let dyr = &dy[r * c..(r + 1) * c];
                for i in 0..c {
                    let xhat = (xr[i] - mean[i]) * invstd[i];
                    let t = dyr[i] * m - sum_dy[i] - xhat * sum_dy_xhat[i];
                    gxr[i] = gxr[i] + gv[i] * invstd[i] * t / m;
                }
            }
        }
        accumulate(self.ensure_grad(gamma), &sum_dy_xhat);
        accumulate(self.ensure_grad(beta), &sum_dy);
    }
}
