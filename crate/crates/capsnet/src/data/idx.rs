//! Big-endian IDX container parsing (MNIST / Fashion-MNIST distribution
//! format): magic `0x00000803` for image files, `0x00000801` for label
//! files, 4-byte big-endian dimension list, unsigned byte payload.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{bail, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => bail!(Truncated, "IDX file ends inside the {what} field"),
    }
}

pub(crate) fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        bail!(BadMagic, "expected image magic {IMAGES_MAGIC:#010x}, found {magic:#010x}");
    }
    let count = read_u32_be(bytes, 4, "count")? as usize;
    let rows = read_u32_be(bytes, 8, "rows")? as usize;
    let cols = read_u32_be(bytes, 12, "cols")? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        bail!(Truncated, "image payload holds {} bytes, header promises {}", bytes.len() - 16, count * rows * cols);
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub(crate) fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        bail!(BadMagic, "expected label magic {LABELS_MAGIC:#010x}, found {magic:#010x}");
    }
    let count = read_u32_be(bytes, 4, "count")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        bail!(Truncated, "label payload holds {} bytes, header promises {count}", bytes.len() - 8);
    }
    Ok(bytes[8..need].to_vec())
}

pub(crate) fn dataset_from_idx_bytes(
    name: &str,
    split: Split,
    image_bytes: &[u8],
    label_bytes: &[u8],
) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        bail!(CountMismatch, "{count} images but {} labels", labels.len());
    }
    let classes = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(1);
    Dataset::new(name, split, classes, (rows, cols, 1), pixels, labels)
}

/// Load an IDX image/label file pair into a dataset of `[H, W, 1]` samples.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path.as_ref())?;
    let name = images_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    dataset_from_idx_bytes(&name, split, &image_bytes, &label_bytes)
}
