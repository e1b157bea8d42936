//! Deterministic shuffled batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{bail, Result};

/// One training batch. Images are `[B, H, W, C]` flat; labels come both as
/// indices and one-hot rows.
pub struct Batch {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub one_hot: Vec<f32>,
    pub indices: Vec<usize>,
    pub size: usize,
}

/// Iterate the dataset once in an order shuffled deterministically by
/// `(seed, epoch)`. The final partial batch is included.
pub fn batch_iter<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size == 0 {
        bail!(InvalidArgument, "batch size must be >= 1");
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    let per = dataset.pixels_per_image();
    let classes = dataset.classes;
    Ok((0..order.len().div_ceil(batch_size)).map(move |b| {
        let chunk = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        let mut images = Vec::with_capacity(chunk.len() * per);
        let mut labels = Vec::with_capacity(chunk.len());
        let mut one_hot = vec![0.0f32; chunk.len() * classes];
        for (row, &i) in chunk.iter().enumerate() {
            images.extend_from_slice(dataset.image(i));
            let l = dataset.labels[i] as usize;
            labels.push(l);
            one_hot[row * classes + l] = 1.0;
        }
        Batch { images, labels, one_hot, indices: chunk.to_vec(), size: chunk.len() }
    }))
}
