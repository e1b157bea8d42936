//! Dataset ingestion, preprocessing, and batching.
//!
//! Loaders are pure: the same bytes always produce the same dataset, and
//! every pixel is scaled to `[0, 1]` at load time.

mod batch;
mod cifar;
mod idx;
mod preprocess;

pub use batch::{batch_iter, Batch};
pub use cifar::load_cifar10_bin;
pub use idx::load_idx;
pub use preprocess::{augment_flip, augment_shift, resize_bilinear};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One image with its class index.
pub struct Sample<'a> {
    pub image: &'a [f32],
    pub label: usize,
}

/// An in-memory image-classification dataset, channels-last `[H, W, C]`
/// per sample, pixels in `[0, 1]`.
#[derive(Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        classes: usize,
        (height, width, channels): (usize, usize, usize),
        images: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || images.len() % per != 0 {
            bail!(ShapeMismatch, "image buffer of {} values does not tile {height}x{width}x{channels}", images.len());
        }
        if images.len() / per != labels.len() {
            bail!(CountMismatch, "{} images but {} labels", images.len() / per, labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            bail!(InvalidArgument, "label {bad} out of range for {classes} classes");
        }
        if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            bail!(InvalidArgument, "pixel {p} outside [0, 1]");
        }
        Ok(Dataset {
            name: name.into(),
            split,
            classes,
            height,
            width,
            channels,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.pixels_per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample { image: self.image(i), label: self.labels[i] as usize }
    }

    /// First `count` samples (data order), same class count.
    pub fn head(&self, count: usize) -> Result<Dataset> {
        if count == 0 || count > self.len() {
            bail!(InvalidArgument, "subset of {count} samples from a dataset of {}", self.len());
        }
        let per = self.pixels_per_image();
        Dataset::new(
            self.name.clone(),
            self.split,
            self.classes,
            (self.height, self.width, self.channels),
            self.images[..count * per].to_vec(),
            self.labels[..count].to_vec(),
        )
    }

    /// Index of the first sample of each class, in class order; `None` for
    /// classes absent from the dataset.
    pub fn first_of_each_class(&self) -> Vec<Option<usize>> {
        let mut firsts = vec![None; self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            let slot = &mut firsts[l as usize];
            if slot.is_none() {
                *slot = Some(i);
            }
        }
        firsts
    }
}
