//! Convolution ops: cross-correlation semantics, channels-last layout,
//! im2col fast path into GEMM. Batch samples are processed in parallel;
//! kernel-gradient accumulation is chunked in a fixed order so results do
//! not depend on the worker count.

use rayon::prelude::*;
use std::rc::Rc;

use super::element::Element;
use super::kernels::{self, Padding};
use super::shape::Shape;
use super::tape::{Op, TapeInner, Tensor};
use crate::error::{bail, Result};

/// Fixed batch-chunk size for order-independent gradient accumulation.
const GRAD_CHUNK: usize = 8;

impl<E: Element> Tensor<E> {
    /// 2-D convolution. `self: [N, H, W, Cin]`, `kernel: [kh, kw, Cin, Cout]`
    /// -> `[N, H', W', Cout]` with `H' = ceil(H/stride)` for same padding and
    /// `floor((H-kh)/stride)+1` for valid.
    pub fn conv2d(&self, kernel: &Tensor<E>, stride: usize, padding: Padding) -> Result<Tensor<E>> {
        self.same_tape(kernel)?;
        if self.shape.rank() != 4 {
            bail!(ShapeMismatch, "conv2d: input must be [N,H,W,Cin], got {}", self.shape);
        }
        if kernel.shape.rank() != 4 {
            bail!(ShapeMismatch, "conv2d: kernel must be [kh,kw,Cin,Cout], got {}", kernel.shape);
        }
        let [n, h, w, cin] = dims4(&self.shape);
        let [kh, kw, kcin, cout] = dims4(&kernel.shape);
        if kcin != cin {
            bail!(ShapeMismatch, "conv2d: input channel axis is {cin} but kernel expects {kcin}");
        }
        if stride == 0 {
            bail!(InvalidArgument, "conv2d: stride must be >= 1");
        }
        if padding == Padding::Valid && (kh > h || kw > w) {
            bail!(ShapeMismatch, "conv2d: kernel {kh}x{kw} exceeds input {h}x{w} on a spatial axis (valid padding)");
        }
        let (oh, ph) = kernels::conv_axis_geometry(h, kh, stride, padding);
        let (ow, pw) = kernels::conv_axis_geometry(w, kw, stride, padding);
        let patch = kh * kw * cin;

        let input_rc = self.values();
        let input: &[E] = &input_rc;
        let kern_rc = kernel.values();
        let kern: &[E] = &kern_rc;
        let mut out = vec![E::zero(); n * oh * ow * cout];
        out.par_chunks_exact_mut(oh * ow * cout)
            .zip(input.par_chunks_exact(h * w * cin))
            .for_each(|(out_s, in_s)| {
                let mut cols = vec![E::zero(); oh * ow * patch];
                kernels::im2col_2d(in_s, h, w, cin, kh, kw, stride, stride, ph, pw, oh, ow, &mut cols);
                kernels::matmul_nn(oh * ow, patch, cout, &cols, kern, out_s);
            });
        self.tape.record(
            out,
            Shape::new(vec![n, oh, ow, cout])?,
            Op::Conv2d { input: self.id, kernel: kernel.id, stride: (stride, stride), padding },
        )
    }

    /// 3-D convolution. `self: [N, D, H, W, Cin]`,
    /// `kernel: [kd, kh, kw, Cin, Cout]` -> `[N, D', H', W', Cout]`.
    pub fn conv3d(&self, kernel: &Tensor<E>, strides: (usize, usize, usize), padding: Padding) -> Result<Tensor<E>> {
        self.same_tape(kernel)?;
        if self.shape.rank() != 5 {
            bail!(ShapeMismatch, "conv3d: input must be [N,D,H,W,Cin], got {}", self.shape);
        }
        if kernel.shape.rank() != 5 {
            bail!(ShapeMismatch, "conv3d: kernel must be [kd,kh,kw,Cin,Cout], got {}", kernel.shape);
        }
        let [n, d, h, w, cin] = dims5(&self.shape);
        let [kd, kh, kw, kcin, cout] = dims5(&kernel.shape);
        if kcin != cin {
            bail!(ShapeMismatch, "conv3d: input channel axis is {cin} but kernel expects {kcin}");
        }
        let (sd, sh, sw) = strides;
        if sd == 0 || sh == 0 || sw == 0 {
            bail!(InvalidArgument, "conv3d: strides must be >= 1");
        }
        if padding == Padding::Valid && (kd > d || kh > h || kw > w) {
            bail!(ShapeMismatch, "conv3d: kernel {kd}x{kh}x{kw} exceeds input {d}x{h}x{w} on an axis (valid padding)");
        }
        let (od, pd) = kernels::conv_axis_geometry(d, kd, sd, padding);
        let (oh, ph) = kernels::conv_axis_geometry(h, kh, sh, padding);
        let (ow, pw) = kernels::conv_axis_geometry(w, kw, sw, padding);
        let patch = kd * kh * kw * cin;

        let input_rc = self.values();
        let input: &[E] = &input_rc;
        let kern_rc = kernel.values();
        let kern: &[E] = &kern_rc;
        let mut out = vec![E::zero(); n * od * oh * ow * cout];
        out.par_chunks_exact_mut(od * oh * ow * cout)
            .zip(input.par_chunks_exact(d * h * w * cin))
            .for_each(|(out_s, in_s)| {
                let mut cols = vec![E::zero(); od * oh * ow * patch];
                kernels::vol2col_3d(in_s, d, h, w, cin, (kd, kh, kw), (sd, sh, sw), (pd, ph, pw), (od, oh, ow), &mut cols);
                kernels::matmul_nn(od * oh * ow, patch, cout, &cols, kern, out_s);
            });
        self.tape.record(
            out,
            Shape::new(vec![n, od, oh, ow, cout])?,
            Op::Conv3d { input: self.id, kernel: kernel.id, strides, padding },
        )
    }

    /// Transposed 2-D convolution (fractionally-strided upsampling).
    /// `self: [N, h, w, Cin]`, `kernel: [kh, kw, Cin, Cout]` ->
    /// same padding: `[N, h*s, w*s, Cout]`; valid: `[N, (h-1)s+kh, (w-1)s+kw, Cout]`.
    pub fn conv_transpose2d(&self, kernel: &Tensor<E>, stride: usize, padding: Padding) -> Result<Tensor<E>> {
        self.same_tape(kernel)?;
        if self.shape.rank() != 4 || kernel.shape.rank() != 4 {
            bail!(ShapeMismatch, "conv_transpose2d: expected input [N,h,w,Cin] and kernel [kh,kw,Cin,Cout], got {} and {}", self.shape, kernel.shape);
        }
        let [n, h, w, cin] = dims4(&self.shape);
        let [kh, kw, kcin, cout] = dims5_to4(&kernel.shape);
        if kcin != cin {
            bail!(ShapeMismatch, "conv_transpose2d: input channel axis is {cin} but kernel expects {kcin}");
        }
        if stride == 0 {
            bail!(InvalidArgument, "conv_transpose2d: stride must be >= 1");
        }
        let (oh, ow, ph, pw) = transpose_geometry(h, w, kh, kw, stride, padding);

        let input_rc = self.values();
        let input: &[E] = &input_rc;
        let kern_rc = kernel.values();
        // kernel permuted to [Cin, kh*kw*Cout] so each input pixel's
        // contribution is one GEMM row
        let kperm = permute_kernel_tr(&kern_rc, kh, kw, cin, cout);
        let kperm: &[E] = &kperm;
        let mut out = vec![E::zero(); n * oh * ow * cout];
        out.par_chunks_exact_mut(oh * ow * cout)
            .zip(input.par_chunks_exact(h * w * cin))
            .for_each(|(out_s, in_s)| {
                let mut tmp = vec![E::zero(); h * w * kh * kw * cout];
                kernels::matmul_nn(h * w, cin, kh * kw * cout, in_s, kperm, &mut tmp);
                scatter_transpose(&tmp, h, w, kh, kw, cout, stride, ph, pw, oh, ow, out_s);
            });
        self.tape.record(
            out,
            Shape::new(vec![n, oh, ow, cout])?,
            Op::ConvTranspose2d { input: self.id, kernel: kernel.id, stride, padding },
        )
    }
}

fn dims4(s: &Shape) -> [usize; 4] {
    [s.axis(0), s.axis(1), s.axis(2), s.axis(3)]
}

fn dims5(s: &Shape) -> [usize; 5] {
    [s.axis(0), s.axis(1), s.axis(2), s.axis(3), s.axis(4)]
}

fn dims5_to4(s: &Shape) -> [usize; 4] {
    [s.axis(0), s.axis(1), s.axis(2), s.axis(3)]
}

fn transpose_geometry(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> (usize, usize, usize, usize) {
    match padding {
        Padding::Same => {
            let oh = h * stride;
            let ow = w * stride;
            let ph = ((h - 1) * stride + kh).saturating_sub(oh) / 2;
            let pw = ((w - 1) * stride + kw).saturating_sub(ow) / 2;
            (oh, ow, ph, pw)
        }
        Padding::Valid => ((h - 1) * stride + kh, (w - 1) * stride + kw, 0, 0),
    }
}

/// `[kh,kw,Cin,Cout]` -> `[Cin, kh*kw*Cout]`.
fn permute_kernel_tr<E: Element>(kern: &[E], kh: usize, kw: usize, cin: usize, cout: usize) -> Vec<E> {
    let mut kp = vec![E::zero(); cin * kh * kw * cout];
    for ky in 0..kh {
        for kx in 0..kw {
            for ci in 0..cin {
                let src = ((ky * kw + kx) * cin + ci) * cout;
                let dst = (ci * kh * kw + ky * kw + kx) * cout;
                kp[dst..dst + cout].copy_from_slice(&kern[src..src + cout]);
            }
        }
    }
    kp
}

#[allow(clippy::too_many_arguments)]
fn scatter_transpose<E: Element>(
    tmp: &[E],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * kh * kw * cout;
            for ky in 0..kh {
                let oy = (y * stride + ky) as isize - ph as isize;
                if oy < 0 || oy as usize >= oh {
                    continue;
                }
                for kx in 0..kw {
                    let ox = (x * stride + kx) as isize - pw as isize;
                    if ox < 0 || ox as usize >= ow {
                        continue;
                    }
                    let src = row + (ky * kw + kx) * cout;
                    let dst = (oy as usize * ow + ox as usize) * cout;
                    for c in 0..cout {
                        out[dst + c] = out[dst + c] + tmp[src + c];
                    }
                }
            }
        }
    }
}

/// Inverse of [`scatter_transpose`]: gather `d_tmp` rows from `d_out`.
#[allow(clippy::too_many_arguments)]
fn gather_transpose<E: Element>(
    d_out: &[E],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    d_tmp: &mut [E],
) {
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * kh * kw * cout;
            for ky in 0..kh {
                let oy = (y * stride + ky) as isize - ph as isize;
                for kx in 0..kw {
                    let ox = (x * stride + kx) as isize - pw as isize;
                    let dst = row + (ky * kw + kx) * cout;
                    if oy >= 0 && (oy as usize) < oh && ox >= 0 && (ox as usize) < ow {
                        let src = (oy as usize * ow + ox as usize) * cout;
                        d_tmp[dst..dst + cout].copy_from_slice(&d_out[src..src + cout]);
                    } else {
                        d_tmp[dst..dst + cout].fill(E::zero());
                    }
                }
            }
        }
    }
}

impl<E: Element> TapeInner<E> {
    pub(crate) fn backward_conv2d(&mut self, input: usize, kernel: usize, stride: (usize, usize), padding: Padding, out: usize, dy: &[E]) {
        let in_shape = self.shapes[input].clone();
        let k_shape = self.shapes[kernel].clone();
        let out_shape = self.shapes[out].clone();
        let [n, h, w, cin] = dims4(&in_shape);
        let [kh, kw, _, cout] = dims4(&k_shape);
        let (oh, ow) = (out_shape.axis(1), out_shape.axis(2));
        let (_, ph) = kernels::conv_axis_geometry(h, kh, stride.0, padding);
        let (_, pw) = kernels::conv_axis_geometry(w, kw, stride.1, padding);
        let patch = kh * kw * cin;

        let in_rc = Rc::clone(&self.values[input]);
        let in_vals: &[E] = &in_rc;
        let k_rc = Rc::clone(&self.values[kernel]);
        let k_vals: &[E] = &k_rc;

        // d_input: per-sample, fully parallel
        {
            let g_in = self.ensure_grad(input);
            g_in.par_chunks_exact_mut(h * w * cin)
                .zip(dy.par_chunks_exact(oh * ow * cout))
                .for_each(|(gi, dys)| {
                    let mut d_cols = vec![E::zero(); oh * ow * patch];
                    kernels::matmul_nt(oh * ow, cout, patch, dys, k_vals, &mut d_cols);
                    kernels::col2im_2d(&d_cols, h, w, cin, kh, kw, stride.0, stride.1, ph, pw, oh, ow, gi);
                });
        }

        // d_kernel: fixed-size chunks reduced in chunk order
        let ksize = patch * cout;
        let partials: Vec<Vec<E>> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|ci| {
                let lo = ci * GRAD_CHUNK;
                let hi = (lo + GRAD_CHUNK).min(n);
                let mut dw = vec![E::zero(); ksize];
                let mut cols = vec![E::zero(); oh * ow * patch];
                for s in lo..hi {
                    let in_s = &in_vals[s * h * w * cin..(s + 1) * h * w * cin];
                    let dy_s = &dy[s * oh * ow * cout..(s + 1) * oh * ow * cout];
                    kernels::im2col_2d(in_s, h, w, cin, kh, kw, stride.0, stride.1, ph, pw, oh, ow, &mut cols);
                    kernels::matmul_tn_acc(patch, oh * ow, cout, &cols, dy_s, &mut dw);
                }
                dw
            })
            .collect();
        let g_k = self.ensure_grad(kernel);
        for p in &partials {
            for (g, &v) in g_k.iter_mut().zip(p) {
                *g = *g + v;
            }
        }
    }

    pub(crate) fn backward_conv3d(
        &mut self,
        input: usize,
        kernel: usize,
        strides: (usize, usize, usize),
        padding: Padding,
        out: usize,
        dy: &[E],
    ) {
        let in_shape = self.shapes[input].clone();
        let k_shape = self.shapes[kernel].clone();
        let out_shape = self.shapes[out].clone();
        let [n, d, h, w, cin] = dims5(&in_shape);
        let [kd, kh, kw, _, cout] = dims5(&k_shape);
        let (od, oh, ow) = (out_shape.axis(1), out_shape.axis(2), out_shape.axis(3));
        let (sd, sh, sw) = strides;
        let (_, pd) = kernels::conv_axis_geometry(d, kd, sd, padding);
        let (_, ph) = kernels::conv_axis_geometry(h, kh, sh, padding);
        let (_, pw) = kernels::conv_axis_geometry(w, kw, sw, padding);
        let patch = kd * kh * kw * cin;
        let vol = d * h * w * cin;
        let ovol = od * oh * ow * cout;

        let in_rc = Rc::clone(&self.values[input]);
        let in_vals: &[E] = &in_rc;
        let k_rc = Rc::clone(&self.values[kernel]);
        let k_vals: &[E] = &k_rc;

        {
            let g_in = self.ensure_grad(input);
            g_in.par_chunks_exact_mut(vol)
                .zip(dy.par_chunks_exact(ovol))
                .for_each(|(gi, dys)| {
                    let mut d_cols = vec![E::zero(); od * oh * ow * patch];
                    kernels::matmul_nt(od * oh * ow, cout, patch, dys, k_vals, &mut d_cols);
                    kernels::col2vol_3d(&d_cols, d, h, w, cin, (kd, kh, kw), (sd, sh, sw), (pd, ph, pw), (od, oh, ow), gi);
                });
        }

        let ksize = patch * cout;
        let partials: Vec<Vec<E>> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|ci| {
                let lo = ci * GRAD_CHUNK;
                let hi = (lo + GRAD_CHUNK).min(n);
                let mut dw = vec![E::zero(); ksize];
                let mut cols = vec![E::zero(); od * oh * ow * patch];
                for s in lo..hi {
                    let in_s = &in_vals[s * vol..(s + 1) * vol];
                    let dy_s = &dy[s * ovol..(s + 1) * ovol];
                    kernels::vol2col_3d(in_s, d, h, w, cin, (kd, kh, kw), (sd, sh, sw), (pd, ph, pw), (od, oh, ow), &mut cols);
                    kernels::matmul_tn_acc(patch, od * oh * ow, cout, &cols, dy_s, &mut dw);
                }
                dw
            })
            .collect();
        let g_k = self.ensure_grad(kernel);
        for p in &partials {
            for (g, &v) in g_k.iter_mut().zip(p) {
                *g = *g + v;
            }
        }
    }

    pub(crate) fn backward_conv_transpose2d(&mut self, input: usize, kernel: usize, stride: usize, padding: Padding, out: usize, dy: &[E]) {
        let in_shape = self.shapes[input].clone();
        let k_shape = self.shapes[kernel].clone();
        let out_shape = self.shapes[out].clone();
        let [n, h, w, cin] = dims4(&in_shape);
        let [kh, kw, _, cout] = dims4(&k_shape);
        let (oh, ow) = (out_shape.axis(1), out_shape.axis(2));
        let (_, _, ph, pw) = transpose_geometry(h, w, kh, kw, stride, padding);
        let tmp_w = kh * kw * cout;

        let in_rc = Rc::clone(&self.values[input]);
        let in_vals: &[E] = &in_rc;
        let k_rc = Rc::clone(&self.values[kernel]);
        let kperm = permute_kernel_tr(&k_rc, kh, kw, cin, cout);
        let kperm: &[E] = &kperm;

        {
            let g_in = self.ensure_grad(input);
            g_in.par_chunks_exact_mut(h * w * cin)
                .zip(dy.par_chunks_exact(oh * ow * cout))
                .for_each(|(gi, dys)| {
                    let mut d_tmp = vec![E::zero(); h * w * tmp_w];
                    gather_transpose(dys, h, w, kh, kw, cout, stride, ph, pw, oh, ow, &mut d_tmp);
                    let mut d_in = vec![E::zero(); h * w * cin];
                    kernels::matmul_nt(h * w, tmp_w, cin, &d_tmp, kperm, &mut d_in);
                    for (g, &v) in gi.iter_mut().zip(&d_in) {
                        *g = *g + v;
                    }
                });
        }

        let partials: Vec<Vec<E>> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|ci| {
                let lo = ci * GRAD_CHUNK;
                let hi = (lo + GRAD_CHUNK).min(n);
                let mut d_kperm = vec![E::zero(); cin * tmp_w];
                let mut d_tmp = vec![E::zero(); h * w * tmp_w];
                for s in lo..hi {
                    let in_s = &in_vals[s * h * w * cin..(s + 1) * h * w * cin];
                    let dy_s = &dy[s * oh * ow * cout..(s + 1) * oh * ow * cout];
                    gather_transpose(dy_s, h, w, kh, kw, cout, stride, ph, pw, oh, ow, &mut d_tmp);
                    kernels::matmul_tn_acc(cin, h * w, tmp_w, in_s, &d_tmp, &mut d_kperm);
                }
                d_kperm
            })
            .collect();
        let g_k = self.ensure_grad(kernel);
        for p in &partials {
            // un-permute [Cin, kh*kw*Cout] back onto [kh,kw,Cin,Cout]
            for ky in 0..kh {
                for kx in 0..kw {
                    for ci in 0..cin {
                        let src = (ci * kh * kw + ky * kw + kx) * cout;
                        let dst = ((ky * kw + kx) * cin + ci) * cout;
                        for c in 0..cout {
                            g_k[dst + c] = g_k[dst + c] + p[src + c];
                        }
                    }
                }
            }
        }
    }
}
