//! Raw numeric kernels on flat row-major buffers.
//!
//! Convolutions use the patch-gather (im2col) fast path feeding a GEMM; the
//! naive nested-loop references that validate them live in [`crate::reference`].

use super::element::Element;

/// Padding mode shared by all convolution ops.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zero padding split with the extra
    /// element on the trailing edge.
    Same,
    /// No padding; output extent `floor((in - k) / stride) + 1`.
    Valid,
}

/// Per-axis convolution geometry: output extent and leading-edge padding.
pub(crate) fn conv_axis_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            let out = (input - kernel) / stride + 1;
            (out, 0)
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out - 1) * stride + kernel;
            let total = needed.saturating_sub(input);
            (out, total / 2)
        }
    }
}

pub(crate) fn matmul_nn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, E::one(), a, b, E::zero(), c);
}

/// `c += a^T @ b` where `a: [k, m]`, `b: [k, n]` (both row-major).
pub(crate) fn matmul_tn_acc<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    // a^T has row stride 1 and column stride m when a is [k, m] row-major,
    // so express the product through a temporary transpose-free GEMM.
    // matrixmultiply takes arbitrary strides, but the Element trait keeps a
    // row-major-only surface; transpose a into scratch instead.
    let mut at = vec![E::zero(); m * k];
    transpose_into(a, &mut at, k, m);
    let mut tmp = vec![E::zero(); m * n];
    E::gemm(m, k, n, E::one(), &at, b, E::zero(), &mut tmp);
    for (ci, ti) in c.iter_mut().zip(tmp.iter()) {
        *ci = *ci + *ti;
    }
}

/// `c = a @ b^T` where `a: [m, k]`, `b: [n, k]` (both row-major).
pub(crate) fn matmul_nt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    let mut bt = vec![E::zero(); k * n];
    transpose_into(b, &mut bt, n, k);
    E::gemm(m, k, n, E::one(), a, &bt, E::zero(), c);
}

/// Transpose `src: [rows, cols]` into `dst: [cols, rows]`.
pub(crate) fn transpose_into<E: Element>(src: &[E], dst: &mut [E], rows: usize, cols: usize) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Gather one sample's conv patches: `cols: [oh*ow, kh*kw*cin]`, patch
/// elements ordered (ky, kx, ci) to match the `[kh,kw,cin,cout]` kernel layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_2d<E: Element>(
    input: &[E],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    let patch = kh * kw * cin;
    debug_assert_eq!(cols.len(), oh * ow * patch);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * sh + ky) as isize - ph as isize;
                for kx in 0..kw {
                    let ix = (ox * sw + kx) as isize - pw as isize;
                    let dst = row + (ky * kw + kx) * cin;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = (iy as usize * w + ix as usize) * cin;
                        cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                    } else {
                        cols[dst..dst + cin].fill(E::zero());
                    }
                }
            }
        }
    }
}

/// Scatter-add of patch gradients back onto one sample's input gradient.
/// Sequential per sample, so accumulation order is fixed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_2d<E: Element>(
    cols: &[E],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    d_input: &mut [E],
) {
    let patch = kh * kw * cin;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * sh + ky) as isize - ph as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * sw + kx) as isize - pw as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = row + (ky * kw + kx) * cin;
                    let dst = (iy as usize * w + ix as usize) * cin;
                    for c in 0..cin {
                        d_input[dst + c] = d_input[dst + c] + cols[src + c];
                    }
                }
            }
        }
    }
}

/// 3D analogue of [`im2col_2d`]: `cols: [od*oh*ow, kd*kh*kw*cin]`, patch
/// elements ordered (kz, ky, kx, ci).
#[allow(clippy::too_many_arguments)]
pub(crate) fn vol2col_3d<E: Element>(
    input: &[E],
    d: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: (usize, usize, usize),
    s: (usize, usize, usize),
    p: (usize, usize, usize),
    o: (usize, usize, usize),
    cols: &mut [E],
) {
    let (kd, kh, kw) = k;
    let (sd, sh, sw) = s;
    let (pd, ph, pw) = p;
    let (od, oh, ow) = o;
    let patch = kd * kh * kw * cin;
    debug_assert_eq!(cols.len(), od * oh * ow * patch);
    for oz in 0..od {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((oz * oh + oy) * ow + ox) * patch;
                for kz in 0..kd {
                    let iz = (oz * sd + kz) as isize - pd as isize;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            let dst = row + ((kz * kh + ky) * kw + kx) * cin;
                            let inside = iz >= 0
                                && (iz as usize) < d
                                && iy >= 0
                                && (iy as usize) < h
                                && ix >= 0
                                && (ix as usize) < w;
                            if inside {
                                let src = ((iz as usize * h + iy as usize) * w + ix as usize) * cin;
                                cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                            } else {
                                cols[dst..dst + cin].fill(E::zero());
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2vol_3d<E: Element>(
    cols: &[E],
    d: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: (usize, usize, usize),
    s: (usize, usize, usize),
    p: (usize, usize, usize),
    o: (usize, usize, usize),
    d_input: &mut [E],
) {
    let (kd, kh, kw) = k;
    let (sd, sh, sw) = s;
    let (pd, ph, pw) = p;
    let (od, oh, ow) = o;
    let patch = kd * kh * kw * cin;
    for oz in 0..od {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((oz * oh + oy) * ow + ox) * patch;
                for kz in 0..kd {
                    let iz = (oz * sd + kz) as isize - pd as isize;
                    if iz < 0 || iz as usize >= d {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let src = row + ((kz * kh + ky) * kw + kx) * cin;
                            let dst = ((iz as usize * h + iy as usize) * w + ix as usize) * cin;
                            for c in 0..cin {
                                d_input[dst + c] = d_input[dst + c] + cols[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stable softmax over the middle axis of an `[outer, len, inner]` view.
pub(crate) fn softmax_mid_axis<E: Element>(x: &[E], outer: usize, len: usize, inner: usize, out: &mut [E]) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = x[base];
            for l in 1..len {
                let v = x[base + l * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                sum = sum + e;
            }
            for l in 0..len {
                out[base + l * inner] = out[base + l * inner] / sum;
            }
        }
    }
}

/// Backward of softmax: `dx = y * (dy - sum(dy * y))` along the axis.
pub(crate) fn softmax_mid_axis_backward<E: Element>(
    y: &[E],
    dy: &[E],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [E],
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = E::zero();
            for l in 0..len {
                dot = dot + dy[base + l * inner] * y[base + l * inner];
            }
            for l in 0..len {
                let idx = base + l * inner;
                dx[idx] = dx[idx] + y[idx] * (dy[idx] - dot);
            }
        }
    }
}

/// Squash nonlinearity over contiguous rows of length `d`:
/// `v = s * g / (1 + S)` with `S = sum(s^2)` and `g = sqrt(S + eps)`, which
/// equals `(S / (1 + S)) * s / ||s||` away from zero and maps 0 to 0.
pub(crate) fn squash_rows<E: Element>(x: &[E], d: usize, out: &mut [E]) {
    let eps = E::EPS_SQUASH;
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let s: E = xr.iter().map(|&v| v * v).sum();
        let factor = (s + eps).sqrt() / (E::one() + s);
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            *o = v * factor;
        }
    }
}

/// Backward of [`squash_rows`]:
/// `ds_j = dy_j * g/q + s_j * (q - 2 g^2) / (g q^2) * <dy, s>`
/// with `q = 1 + S`.
pub(crate) fn squash_rows_backward<E: Element>(x: &[E], dy: &[E], d: usize, dx: &mut [E]) {
    let eps = E::EPS_SQUASH;
    let two = E::from_f64(2.0);
    for ((xr, dyr), dxr) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let s: E = xr.iter().map(|&v| v * v).sum();
        let g = (s + eps).sqrt();
        let q = E::one() + s;
        let dot: E = xr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum();
        let coef = (q - two * g * g) / (g * q * q) * dot;
        let scale = g / q;
        for i in 0..d {
            dxr[i] = dxr[i] + dyr[i] * scale + xr[i] * coef;
        }
    }
}

/// Euclidean norm over contiguous rows of length `d`. Exactly zero rows map
/// to exactly zero; the backward guards the division instead.
pub(crate) fn norm_rows<E: Element>(x: &[E], d: usize, out: &mut [E]) {
    for (xr, o) in x.chunks_exact(d).zip(out.iter_mut()) {
        let s: E = xr.iter().map(|&v| v * v).sum();
        *o = s.sqrt();
    }
}

pub(crate) fn norm_rows_backward<E: Element>(x: &[E], norms: &[E], dy: &[E], d: usize, dx: &mut [E]) {
    let tiny = E::from_f64(1e-30);
    for (r, (xr, dxr)) in x.chunks_exact(d).zip(dx.chunks_exact_mut(d)).enumerate() {
        let n = norms[r];
        if n <= tiny {
            continue; // gradient defined as 0 at the origin
        }
        let scale = dy[r] / n;
        for i in 0..d {
            dxr[i] = dxr[i] + xr[i] * scale;
        }
    }
}
