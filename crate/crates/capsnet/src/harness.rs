//! Evaluation, ensembling, inference benchmarking, and the
//! perturbation/variance analysis commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::DatasetConfig;
use crate::data::{load_cifar10_bin, load_idx, resize_bilinear, Dataset, Split};
use crate::decoder::{activity_vectors, perturb_sweep, variance_rank, ActivityVector};
use crate::error::{bail, Result};
use crate::imagegrid::{tile, write_grid, Grid};
use crate::model::Model;
use crate::params::Params;
use crate::train::argmax;

/// Resolve a dataset from its config. `data_dir` must hold either the IDX
/// pair (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`) or the CIFAR-10
/// binary batches.
pub fn load_dataset(cfg: &DatasetConfig, split: Split) -> Result<Dataset> {
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| crate::Error::Config("dataset.data_dir not set (use --data-dir)".into()))?;
    let mut ds = match cfg.name.as_str() {
        "mnist" | "fashion-mnist" => {
            let (imgs, labels) = match split {
                Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            };
            let mut ds = load_idx(dir.join(imgs), dir.join(labels), split)?;
            ds.name = cfg.name.clone();
            ds.classes = ds.classes.max(10);
            ds
        }
        "cifar10" => load_cifar10_bin(dir, split)?,
        other => bail!(Config, "unknown dataset {other:?} (expected mnist, fashion-mnist, or cifar10)"),
    };
    if cfg.resize_to_64 {
        if (ds.height, ds.width, ds.channels) != (32, 32, 3) {
            bail!(Config, "resize_to_64 applies to 32x32x3 datasets, got {}x{}x{}", ds.height, ds.width, ds.channels);
        }
        let per = ds.pixels_per_image();
        let mut upscaled = Vec::with_capacity(ds.len() * 64 * 64 * 3);
        for i in 0..ds.len() {
            upscaled.extend_from_slice(&resize_bilinear(&ds.images[i * per..(i + 1) * per])?);
        }
        ds = Dataset::new(ds.name.clone(), split, ds.classes, (64, 64, 3), upscaled, ds.labels.clone())?;
    }
    let limit = match split {
        Split::Train => cfg.limit_train,
        Split::Test => cfg.limit_test,
    };
    if let Some(n) = limit {
        ds = ds.head(n.min(ds.len()))?;
    }
    Ok(ds)
}

/// Accuracy plus a per-class confusion matrix (`confusion[true * C + pred]`).
pub struct EvalResult {
    pub accuracy: f64,
    pub confusion: Vec<usize>,
    pub classes: usize,
    pub total: usize,
}

impl EvalResult {
    pub fn confusion_row(&self, class: usize) -> &[usize] {
        &self.confusion[class * self.classes..(class + 1) * self.classes]
    }
}

/// Evaluate a model over a dataset: prediction = argmax of class-capsule
/// norms.
pub fn evaluate(
    model: &Model,
    params: &mut Params<f32>,
    dataset: &Dataset,
    batch_size: usize,
    deterministic: bool,
) -> Result<EvalResult> {
    if batch_size == 0 {
        bail!(InvalidArgument, "batch size must be >= 1");
    }
    let classes = model.arch.classes;
    if dataset.classes > classes {
        bail!(ArchMismatch, "dataset has {} classes, model expects at most {classes}", dataset.classes);
    }
    let [ih, iw, ic] = model.arch.input;
    if (dataset.height, dataset.width, dataset.channels) != (ih, iw, ic) {
        bail!(
            ArchMismatch,
            "dataset samples are {}x{}x{}, model expects {ih}x{iw}x{ic}",
            dataset.height,
            dataset.width,
            dataset.channels
        );
    }
    let mut confusion = vec![0usize; classes * classes];
    let mut correct = 0usize;
    let per = dataset.pixels_per_image();
    let mut i = 0usize;
    while i < dataset.len() {
        let n = batch_size.min(dataset.len() - i);
        let images = &dataset.images[i * per..(i + n) * per];
        let (_tape, out) = model.infer(params, images, n, deterministic, false)?;
        let norms = out.norms.values();
        for row in 0..n {
            let scores: Vec<f64> = norms[row * classes..(row + 1) * classes]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let pred = argmax(&scores);
            let truth = dataset.labels[i + row] as usize;
            confusion[truth * classes + pred] += 1;
            if pred == truth {
                correct += 1;
            }
        }
        i += n;
    }
    Ok(EvalResult {
        accuracy: correct as f64 / dataset.len() as f64,
        confusion,
        classes,
        total: dataset.len(),
    })
}

/// Ensemble prediction: per-sample class scores are the mean of per-model
/// capsule norms (accumulated in f64), then argmax. All member checkpoints
/// must describe the same architecture.
pub fn ensemble_predict(
    checkpoints: &[Checkpoint],
    dataset: &Dataset,
    batch_size: usize,
    deterministic: bool,
) -> Result<EvalResult> {
    if checkpoints.is_empty() {
        bail!(InvalidArgument, "ensemble needs at least one checkpoint");
    }
    let arch = &checkpoints[0].header.arch;
    for (i, ck) in checkpoints.iter().enumerate().skip(1) {
        if &ck.header.arch != arch {
            bail!(ArchMismatch, "ensemble member {i} has a different architecture");
        }
    }
    let mut members: Vec<(Model, Params<f32>)> = Vec::new();
    for ck in checkpoints {
        members.push(ck.build_model()?);
    }
    let classes = arch.classes;
    let per = dataset.pixels_per_image();
    let mut confusion = vec![0usize; classes * classes];
    let mut correct = 0usize;
    let mut i = 0usize;
    while i < dataset.len() {
        let n = batch_size.min(dataset.len() - i);
        let images = &dataset.images[i * per..(i + n) * per];
        let mut scores = vec![0.0f64; n * classes];
        for (model, params) in members.iter_mut() {
            let (_tape, out) = model.infer(params, images, n, deterministic, false)?;
            for (s, &v) in scores.iter_mut().zip(out.norms.values().iter()) {
                *s += v as f64;
            }
        }
        let k = members.len() as f64;
        for row in 0..n {
            let mean: Vec<f64> = scores[row * classes..(row + 1) * classes].iter().map(|s| s / k).collect();
            let pred = argmax(&mean);
            let truth = dataset.labels[i + row] as usize;
            confusion[truth * classes + pred] += 1;
            if pred == truth {
                correct += 1;
            }
        }
        i += n;
    }
    Ok(EvalResult {
        accuracy: correct as f64 / dataset.len() as f64,
        confusion,
        classes,
        total: dataset.len(),
    })
}

/// One latency measurement row.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub batch: usize,
    pub iterations: usize,
    pub mean_ms_per_image: f64,
    pub median_ms_per_image: f64,
    pub trainable_params: usize,
}

/// Measure forward latency per image over warm iterations (single stream).
/// Absolute numbers are hardware-dependent; only relative comparisons are
/// meaningful.
pub fn benchmark_inference(
    model: &Model,
    params: &mut Params<f32>,
    batch_sizes: &[usize],
    iterations: usize,
) -> Result<Vec<BenchRow>> {
    let [ih, iw, ic] = model.arch.input;
    let mut rows = Vec::new();
    for &batch in batch_sizes {
        if batch == 0 {
            bail!(InvalidArgument, "batch size must be >= 1");
        }
        let images = vec![0.5f32; batch * ih * iw * ic];
        for _ in 0..3 {
            model.infer(params, &images, batch, false, false)?;
        }
        let mut times = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let t0 = Instant::now();
            model.infer(params, &images, batch, false, false)?;
            times.push(t0.elapsed().as_secs_f64() * 1000.0 / batch as f64);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let median = times[times.len() / 2];
        rows.push(BenchRow {
            batch,
            iterations,
            mean_ms_per_image: mean,
            median_ms_per_image: median,
            trainable_params: params.trainable_count(),
        });
    }
    Ok(rows)
}

/// Winning activity vectors for a batch of samples.
pub fn winning_vectors(
    model: &Model,
    params: &mut Params<f32>,
    images: &[f32],
    count: usize,
    deterministic: bool,
) -> Result<Vec<ActivityVector<f32>>> {
    let (_tape, out) = model.infer(params, images, count, deterministic, false)?;
    Ok(activity_vectors(&out.class_caps, &out.winners))
}

/// Perturbation-grid command: sweep one instantiation-parameter dimension
/// (**1-indexed** in this user-facing interface) for a row of samples and
/// tile reconstructions row-per-sample, column-per-step.
pub struct PerturbArgs {
    /// 1-indexed instantiation-parameter dimension.
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    /// Explicit sample indices; `None` takes the first sample of each class.
    pub samples: Option<Vec<usize>>,
    pub out_path: PathBuf,
}

impl Default for PerturbArgs {
    fn default() -> Self {
        PerturbArgs {
            dim: 28,
            lo: -0.075,
            hi: 0.075,
            steps: 11,
            samples: None,
            out_path: PathBuf::from("perturb.pgm"),
        }
    }
}

/// Runs the sweep and writes the grid file. Returns the grid and the sample
/// indices used.
pub fn cmd_perturb(
    model: &Model,
    params: &mut Params<f32>,
    dataset: &Dataset,
    args: &PerturbArgs,
) -> Result<(Grid, Vec<usize>)> {
    let d = model.arch.class_caps.out_dim;
    if args.dim == 0 || args.dim > d {
        bail!(InvalidArgument, "dimension {} out of range 1..={d} (dimensions are 1-indexed)", args.dim);
    }
    let dim0 = args.dim - 1;
    let samples: Vec<usize> = match &args.samples {
        Some(s) => s.clone(),
        None => dataset.first_of_each_class().into_iter().flatten().collect(),
    };
    if samples.is_empty() {
        bail!(InvalidArgument, "no samples selected for the sweep");
    }
    if let Some(&bad) = samples.iter().find(|&&s| s >= dataset.len()) {
        bail!(InvalidArgument, "sample index {bad} out of range for dataset of {}", dataset.len());
    }
    let per = dataset.pixels_per_image();
    let mut batch_images = Vec::with_capacity(samples.len() * per);
    for &s in &samples {
        batch_images.extend_from_slice(dataset.image(s));
    }
    let vectors = winning_vectors(model, params, &batch_images, samples.len(), true)?;

    let [h, w, c] = model.decoder_image();
    let mut tiles: Vec<Vec<f32>> = Vec::with_capacity(samples.len() * args.steps);
    for v in &vectors {
        let sweep = perturb_sweep(&model.decoder, params, v, dim0, (args.lo, args.hi), args.steps)?;
        tiles.extend(sweep);
    }
    let grid = tile(&tiles, samples.len(), args.steps, h, w, c)?;
    write_grid(&args.out_path, &grid)?;
    Ok((grid, samples))
}

/// Variance-ranking command: per-dimension variance of winning activity
/// vectors over the dataset, written as CSV `dim,variance,rank` with
/// 1-indexed dimensions, plus optional sweep grids for the top dims.
pub struct VarianceArgs {
    pub out_csv: PathBuf,
    /// Also emit perturbation grids for this many top-variance dims.
    pub sweep_top: usize,
    pub batch_size: usize,
}

pub fn cmd_variance(
    model: &Model,
    params: &mut Params<f32>,
    dataset: &Dataset,
    args: &VarianceArgs,
) -> Result<Vec<(usize, f64)>> {
    if dataset.is_empty() {
        bail!(InvalidArgument, "variance ranking needs a nonempty dataset");
    }
    let per = dataset.pixels_per_image();
    let mut vectors = Vec::with_capacity(dataset.len());
    let mut i = 0usize;
    while i < dataset.len() {
        let n = args.batch_size.min(dataset.len() - i);
        let images = &dataset.images[i * per..(i + n) * per];
        vectors.extend(winning_vectors(model, params, images, n, true)?);
        i += n;
    }
    let ranked = variance_rank(&vectors)?;
    let mut csv = String::from("dim,variance,rank\n");
    for (rank, (dim0, var)) in ranked.iter().enumerate() {
        csv.push_str(&format!("{},{var:.9},{}\n", dim0 + 1, rank + 1));
    }
    std::fs::write(&args.out_csv, csv)?;

    if args.sweep_top > 0 {
        let firsts: Vec<usize> = dataset.first_of_each_class().into_iter().flatten().collect();
        for (dim0, _) in ranked.iter().take(args.sweep_top) {
            let out = args
                .out_csv
                .with_file_name(format!("sweep_dim{:02}.{}", dim0 + 1, if model.decoder_image()[2] == 1 { "pgm" } else { "ppm" }));
            let pargs = PerturbArgs {
                dim: dim0 + 1,
                samples: Some(firsts.clone()),
                out_path: out,
                ..Default::default()
            };
            cmd_perturb(model, params, dataset, &pargs)?;
        }
    }
    Ok(ranked)
}

/// Write a confusion matrix as CSV (rows = true class).
pub fn confusion_csv(result: &EvalResult, path: impl AsRef<Path>) -> Result<()> {
    let mut csv = String::new();
    csv.push_str("true\\pred");
    for c in 0..result.classes {
        csv.push_str(&format!(",{c}"));
    }
    csv.push('\n');
    for r in 0..result.classes {
        csv.push_str(&format!("{r}"));
        for c in 0..result.classes {
            csv.push_str(&format!(",{}", result.confusion[r * result.classes + c]));
        }
        csv.push('\n');
    }
    std::fs::write(path, csv)?;
    Ok(())
}
