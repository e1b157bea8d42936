//! Slow, obviously-correct reference implementations.
//!
//! Straight nested loops written directly from the operation definitions,
//! deliberately sharing no code with the im2col/GEMM fast paths or the
//! routing module. The test suites compare the production ops against these.

use crate::tensor::{Element, Padding};

fn pad_amount(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - kernel) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out - 1) * stride + kernel;
            (out, needed.saturating_sub(input) / 2)
        }
    }
}

/// Naive 2-D convolution: input `[N,H,W,Cin]`, kernel `[kh,kw,Cin,Cout]`.
pub fn conv2d_naive<E: Element>(
    input: &[E],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[E],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    padding: Padding,
) -> (Vec<E>, usize, usize) {
    let (oh, ph) = pad_amount(h, kh, stride, padding);
    let (ow, pw) = pad_amount(w, kw, stride, padding);
    let mut out = vec![E::zero(); n * oh * ow * cout];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = E::zero();
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if iy < 0 || iy as usize >= h || ix < 0 || ix as usize >= w {
                                continue;
                            }
                            for ci in 0..cin {
                                let iv = input[((s * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = kernel[((ky * kw + kx) * cin + ci) * cout + co];
                                acc = acc + iv * kv;
                            }
                        }
                    }
                    out[((s * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Naive 3-D convolution: input `[N,D,H,W,Cin]`, kernel `[kd,kh,kw,Cin,Cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_naive<E: Element>(
    input: &[E],
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[E],
    kd: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    strides: (usize, usize, usize),
    padding: Padding,
) -> (Vec<E>, usize, usize, usize) {
    let (sd, sh, sw) = strides;
    let (od, pd) = pad_amount(d, kd, sd, padding);
    let (oh, ph) = pad_amount(h, kh, sh, padding);
    let (ow, pw) = pad_amount(w, kw, sw, padding);
    let mut out = vec![E::zero(); n * od * oh * ow * cout];
    for s in 0..n {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = E::zero();
                        for kz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iz = (oz * sd + kz) as isize - pd as isize;
                                    let iy = (oy * sh + ky) as isize - ph as isize;
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if iz < 0
                                        || iz as usize >= d
                                        || iy < 0
                                        || iy as usize >= h
                                        || ix < 0
                                        || ix as usize >= w
                                    {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let iv = input[(((s * d + iz as usize) * h + iy as usize) * w
                                            + ix as usize)
                                            * cin
                                            + ci];
                                        let kv = kernel[(((kz * kh + ky) * kw + kx) * cin + ci) * cout + co];
                                        acc = acc + iv * kv;
                                    }
                                }
                            }
                        }
                        out[(((s * od + oz) * oh + oy) * ow + ox) * cout + co] = acc;
                    }
                }
            }
        }
    }
    (out, od, oh, ow)
}

/// Each vote as an explicit weighted sum over a localized child group.
///
/// Capsule grid `[N,H,W,n,d]`, 3-D vote kernel `[d,kh,kw,1,m*d']` (depth
/// extent = child dim, depth stride = child dim, shared across child types).
/// Returns votes `[N,H',W',n,m,d']` plus the spatial output extents.
#[allow(clippy::too_many_arguments)]
pub fn vote_weighted_sum_naive<E: Element>(
    caps: &[E],
    n_batch: usize,
    h: usize,
    w: usize,
    n_types: usize,
    d: usize,
    kernel: &[E],
    kh: usize,
    kw: usize,
    m: usize,
    dp: usize,
    stride: usize,
    padding: Padding,
) -> (Vec<E>, usize, usize) {
    let (oh, ph) = pad_amount(h, kh, stride, padding);
    let (ow, pw) = pad_amount(w, kw, stride, padding);
    let mut votes = vec![E::zero(); n_batch * oh * ow * n_types * m * dp];
    for s in 0..n_batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for t in 0..n_types {
                    for mi in 0..m {
                        for pi in 0..dp {
                            let mut acc = E::zero();
                            // one vote component aggregates the (kh x kw)
                            // spatial group of child capsules of type t
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - ph as isize;
                                    let ix = (ox * stride + kx) as isize - pw as isize;
                                    if iy < 0 || iy as usize >= h || ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    for j in 0..d {
                                        let child = caps[((((s * h + iy as usize) * w + ix as usize)
                                            * n_types
                                            + t)
                                            * d)
                                            + j];
                                        // kernel layout [kd=d, kh, kw, 1, m*d']
                                        let kv = kernel[(((j * kh + ky) * kw + kx) * (m * dp))
                                            + mi * dp
                                            + pi];
                                        acc = acc + child * kv;
                                    }
                                }
                            }
                            votes[((((s * oh + oy) * ow + ox) * n_types + t) * m + mi) * dp + pi] = acc;
                        }
                    }
                }
            }
        }
    }
    (votes, oh, ow)
}

/// Straight-line transcription of the dynamic-routing recurrence for a
/// single batch item. `votes: [K,M,d']`, returns parents `[M,d']`.
///
/// b starts at 0; each iteration: c = softmax(b) over parents (or over
/// children when `softmax_over_children`), s_j = sum_i c_ij * vote_ij,
/// v_j = squash(s_j); all but the last iteration then update
/// b_ij += <v_j, vote_ij>.
pub fn route_straightline(
    votes: &[f64],
    k: usize,
    m: usize,
    dp: usize,
    iterations: usize,
    softmax_over_children: bool,
) -> Vec<f64> {
    assert!(iterations >= 1);
    let mut b = vec![0.0f64; k * m];
    let mut v = vec![0.0f64; m * dp];
    for it in 0..iterations {
        let mut c = vec![0.0f64; k * m];
        if softmax_over_children {
            // softmax over the child axis for each parent
            for mi in 0..m {
                let mut mx = f64::NEG_INFINITY;
                for ki in 0..k {
                    mx = mx.max(b[ki * m + mi]);
                }
                let mut denom = 0.0;
                for ki in 0..k {
                    denom += (b[ki * m + mi] - mx).exp();
                }
                for ki in 0..k {
                    c[ki * m + mi] = (b[ki * m + mi] - mx).exp() / denom;
                }
            }
        } else {
            // softmax over the parent axis for each child
            for ki in 0..k {
                let row = &b[ki * m..(ki + 1) * m];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for mi in 0..m {
                    denom += (row[mi] - mx).exp();
                }
                for mi in 0..m {
                    c[ki * m + mi] = (row[mi] - mx).exp() / denom;
                }
            }
        }
        // weighted sums and squash
        for mi in 0..m {
            let mut s = vec![0.0f64; dp];
            for ki in 0..k {
                for pi in 0..dp {
                    s[pi] += c[ki * m + mi] * votes[(ki * m + mi) * dp + pi];
                }
            }
            let sq: f64 = s.iter().map(|x| x * x).sum();
            let factor = (sq + 1e-8).sqrt() / (1.0 + sq);
            for pi in 0..dp {
                v[mi * dp + pi] = s[pi] * factor;
            }
        }
        if it + 1 < iterations {
            for ki in 0..k {
                for mi in 0..m {
                    let mut dot = 0.0;
                    for pi in 0..dp {
                        dot += v[mi * dp + pi] * votes[(ki * m + mi) * dp + pi];
                    }
                    b[ki * m + mi] += dot;
                }
            }
        }
    }
    v
}

/// Closed-form bilinear interpolation (align-corners false) of one pixel.
pub fn bilinear_sample_naive(img: &[f64], h: usize, w: usize, c: usize, oy: usize, ox: usize, oh: usize, ow: usize, ch: usize) -> f64 {
    let scale_y = h as f64 / oh as f64;
    let scale_x = w as f64 / ow as f64;
    let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
    let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let p = |y: usize, x: usize| img[(y * w + x) * c + ch];
    p(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + p(y0, x1) * (1.0 - fy) * fx
        + p(y1, x0) * fy * (1.0 - fx)
        + p(y1, x1) * fy * fx
}
