//! Image preprocessing: bilinear resize and shift/flip augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// Bilinear 32x32x3 -> 64x64x3 upsampling, align-corners-false convention:
/// source coordinate `(dst + 0.5) * scale - 0.5`, clamped to the image.
/// Output pixels are convex combinations, so the `[0, 1]` range and the
/// input min/max bounds are preserved.
pub fn resize_bilinear(img: &[f32]) -> Result<Vec<f32>> {
    resize_bilinear_general(img, 32, 32, 3, 64, 64)
}

pub(crate) fn resize_bilinear_general(
    img: &[f32],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Result<Vec<f32>> {
    if img.len() != h * w * c {
        bail!(ShapeMismatch, "resize input has {} values, expected {h}x{w}x{c}", img.len());
    }
    let scale_y = h as f64 / oh as f64;
    let scale_x = w as f64 / ow as f64;
    let mut out = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let p = |y: usize, x: usize| img[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Random translation up to `±max_shift` pixels on each axis with zero
/// padding. `max_shift = 0` is the identity. The rng drives determinism.
pub fn augment_shift(img: &[f32], h: usize, w: usize, c: usize, max_shift: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if max_shift == 0 {
        return img.to_vec();
    }
    let m = max_shift as i64;
    let dy = rng.random_range(-m..=m);
    let dx = rng.random_range(-m..=m);
    shift_image(img, h, w, c, dy, dx)
}

pub(crate) fn shift_image(img: &[f32], h: usize, w: usize, c: usize, dy: i64, dx: i64) -> Vec<f32> {
    let mut out = vec![0.0f32; img.len()];
    for y in 0..h as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w as i64 {
            let sx = x - dx;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let dst = ((y as usize) * w + x as usize) * c;
            let src = ((sy as usize) * w + sx as usize) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Horizontal flip with probability 1/2.
pub fn augment_flip(img: &[f32], h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if !rng.random_bool(0.5) {
        return img.to_vec();
    }
    let mut out = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            let dst = (y * w + (w - 1 - x)) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}
