//! CIFAR-10 binary-batch parsing: records of 1 label byte + 3072 bytes of
//! channel-planar RGB (1024 red, 1024 green, 1024 blue), converted to
//! channels-last `[32, 32, 3]`.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{bail, Result};

const RECORD: usize = 1 + 3 * 1024;
const SIDE: usize = 32;

pub(crate) fn parse_cifar_records(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<u8>) -> Result<()> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        bail!(Truncated, "CIFAR-10 batch of {} bytes is not a whole number of {RECORD}-byte records", bytes.len());
    }
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0];
        if label > 9 {
            bail!(InvalidArgument, "CIFAR-10 label {label} out of range 0..10");
        }
        labels.push(label);
        let planes = &rec[1..];
        for y in 0..SIDE {
            for x in 0..SIDE {
                for c in 0..3 {
                    images.push(planes[c * 1024 + y * SIDE + x] as f32 / 255.0);
                }
            }
        }
    }
    Ok(())
}

/// Load CIFAR-10 from the binary-batch directory layout:
/// `data_batch_1.bin` .. `data_batch_5.bin` for train, `test_batch.bin` for
/// test.
pub fn load_cifar10_bin(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<std::path::PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f)?;
        parse_cifar_records(&bytes, &mut images, &mut labels)?;
    }
    Dataset::new("cifar10", split, 10, (SIDE, SIDE, 3), images, labels)
}
