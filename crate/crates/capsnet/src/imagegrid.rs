//! Binary PGM/PPM emission and image-grid tiling for reconstruction and
//! perturbation artifacts.

use std::io::Write;
use std::path::Path;

use crate::error::{bail, Result};

/// A tiled image grid, 8-bit, row-major, `channels` = 1 (PGM) or 3 (PPM).
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bytes: Vec<u8>,
}

pub fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tile images row-major: `images[r * cols + c]` lands at grid row `r`,
/// column `c`. Every image must be `h x w x channels`. The grid is
/// `(rows*h) x (cols*w)` pixels.
pub fn tile(images: &[Vec<f32>], rows: usize, cols: usize, h: usize, w: usize, channels: usize) -> Result<Grid> {
    if images.len() != rows * cols {
        bail!(CountMismatch, "{} images cannot tile {rows}x{cols}", images.len());
    }
    if !(channels == 1 || channels == 3) {
        bail!(InvalidArgument, "grids support 1 or 3 channels, got {channels}");
    }
    let per = h * w * channels;
    if let Some(img) = images.iter().find(|i| i.len() != per) {
        bail!(ShapeMismatch, "image with {} values cannot be {h}x{w}x{channels}", img.len());
    }
    let gw = cols * w;
    let gh = rows * h;
    let mut bytes = vec![0u8; gw * gh * channels];
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..channels {
                    let dst = (((r * h + y) * gw) + (c * w + x)) * channels + ch;
                    bytes[dst] = quantize(img[(y * w + x) * channels + ch]);
                }
            }
        }
    }
    Ok(Grid { width: gw, height: gh, channels, bytes })
}

/// Write a grid as binary PGM (grayscale) or PPM (RGB), maxval 255.
pub fn write_grid(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let mut out = Vec::with_capacity(grid.bytes.len() + 32);
    let magic = if grid.channels == 1 { "P5" } else { "P6" };
    write!(out, "{magic}\n{} {}\n255\n", grid.width, grid.height)?;
    out.extend_from_slice(&grid.bytes);
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a binary PGM/PPM header, returning `(width, height, channels,
/// payload offset)`. Used by the golden-dimension tests.
pub fn read_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!(CorruptHeader, "missing {what} in netpbm header");
        }
        let t = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| crate::Error::CorruptHeader(format!("non-ASCII {what}")))?
            .to_string();
        // consume exactly one whitespace separator after the token
        if pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(t)
    };
    let magic = token("magic")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => bail!(BadMagic, "expected P5/P6, found {other:?}"),
    };
    let w: usize = token("width")?.parse().map_err(|_| crate::Error::CorruptHeader("bad width".into()))?;
    let h: usize = token("height")?.parse().map_err(|_| crate::Error::CorruptHeader("bad height".into()))?;
    let maxval: usize = token("maxval")?.parse().map_err(|_| crate::Error::CorruptHeader("bad maxval".into()))?;
    if maxval != 255 {
        bail!(CorruptHeader, "expected maxval 255, found {maxval}");
    }
    Ok((w, h, channels, pos))
}
