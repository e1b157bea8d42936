//! Training loop: Adam updates, per-epoch metrics, best/last checkpoints,
//! deterministic replay from `(config, seed)`.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caps::{Forward, Mode};
use crate::checkpoint::{Checkpoint, MetricsSnapshot, RngState};
use crate::config::{OptimizerConfig, RunConfig};
use crate::data::{augment_flip, augment_shift, batch_iter, Dataset};
use crate::error::{bail, Result};
use crate::harness::{evaluate, load_dataset};
use crate::losses::{margin_loss, reconstruction_loss, total_loss};
use crate::model::Model;
use crate::params::Params;
use crate::tensor::{Element, Shape, Tape};

/// Adam with exponential learning-rate decay per epoch.
pub struct Adam<E: Element> {
    cfg: OptimizerConfig,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: OptimizerConfig, params: &Params<E>) -> Self {
        let m = params.entries().iter().map(|e| vec![E::zero(); e.data.len()]).collect();
        let v = params.entries().iter().map(|e| vec![E::zero(); e.data.len()]).collect();
        Adam { cfg, m, v, t: 0 }
    }

    /// Learning rate for an epoch: `lr0 * decay^epoch`.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        self.cfg.learning_rate * self.cfg.decay.powi(epoch as i32)
    }

    /// `p -= lr * mhat / (sqrt(vhat) + eps)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut Params<E>, grads: &[Option<Vec<E>>], lr: f64) {
        self.t += 1;
        let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::one() - b1;
        let one_m_b2 = E::one() - b2;
        let eps = E::from_f64(self.cfg.eps);
        let lr = E::from_f64(lr);
        for id in 0..params.len() {
            if !params.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id).and_then(|g| g.as_ref()) else {
                continue;
            };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let data = params.data_mut(id);
            for i in 0..data.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Artifacts produced by [`train`].
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    pub global_steps: u64,
}

pub const METRICS_HEADER: &str = "epoch,step,train_loss,train_margin,train_recon,train_acc,test_acc,wall_time_s";

/// Train per the config; writes `metrics.csv`, `best.ckpt`, `last.ckpt` into
/// the config's output directory. Aborts with a diagnostic naming the step
/// if the loss stops being finite.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train_ds = load_dataset(&config.dataset, crate::data::Split::Train)?;
    let test_ds = load_dataset(&config.dataset, crate::data::Split::Test)?;
    train_on(config, &train_ds, &test_ds)
}

/// [`train`] with datasets supplied by the caller (tests, subsets).
pub fn train_on(config: &RunConfig, train_ds: &Dataset, test_ds: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = &config.train.out_dir;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let seed = config.train.seed;
    let (model, mut params) = Model::build::<f32>(&config.arch, seed)?;
    let mut adam = Adam::new(config.optimizer.clone(), &params);
    let with_decoder = config.margin.recon_weight > 0.0;
    let [ih, iw, ic] = config.arch.input;
    let per_image = ih * iw * ic;

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');

    let start = Instant::now();
    let mut best_test_acc = f64::NEG_INFINITY;
    let mut final_test_acc = 0.0;
    let mut global_step: u64 = 0;

    let save_ckpt = |params: &Params<f32>, rng: RngState, metrics: Option<MetricsSnapshot>, path: &PathBuf| -> Result<()> {
        Checkpoint::from_params(&config.arch, &config.margin, rng, metrics, params).save(path)
    };

    if config.train.epochs == 0 {
        std::fs::write(&metrics_path, &metrics)?;
        let rng = RngState { seed, epoch: 0, step: 0 };
        save_ckpt(&params, rng.clone(), None, &last_path)?;
        save_ckpt(&params, rng, None, &best_path)?;
        return Ok(TrainOutcome {
            metrics_path,
            best_path,
            last_path,
            best_test_acc: 0.0,
            final_test_acc: 0.0,
            global_steps: 0,
        });
    }

    for epoch in 0..config.train.epochs {
        let lr = adam.epoch_lr(epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(seed);
        aug_rng.set_stream((1u64 << 32) | epoch as u64);

        let mut sum_total = 0.0;
        let mut sum_margin = 0.0;
        let mut sum_recon = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;

        for batch in batch_iter(train_ds, config.train.batch_size, seed, epoch as u64)? {
            let mut images = batch.images;
            if config.dataset.max_shift > 0 || config.dataset.flip {
                for img in images.chunks_exact_mut(per_image) {
                    let mut shifted =
                        augment_shift(img, ih, iw, ic, config.dataset.max_shift, &mut aug_rng);
                    if config.dataset.flip {
                        shifted = augment_flip(&shifted, ih, iw, ic, &mut aug_rng);
                    }
                    img.copy_from_slice(&shifted);
                }
            }

            let tape = if config.train.deterministic { Tape::deterministic() } else { Tape::new() };
            let mut cx = Forward::new(tape.clone(), &mut params, Mode::Train)?;
            let x = cx.tape.var(images, Shape::new(vec![batch.size, ih, iw, ic])?)?;
            let out = model.forward(&mut cx, &x, Some(&batch.labels), with_decoder)?;

            let one_hot = cx.tape.constant(batch.one_hot.clone(), Shape::new(vec![batch.size, config.arch.classes])?)?;
            let margin = margin_loss(&out.norms, &one_hot, &config.margin)?;
            let recon = match (&out.recon, with_decoder) {
                (Some(r), true) => Some(reconstruction_loss(r, &x)?),
                _ => None,
            };
            let (total, report) = total_loss(&margin, recon.as_ref(), &out.norms, &config.margin)?;

            if !report.total.is_finite() {
                bail!(
                    NonFinite,
                    "loss became non-finite at epoch {epoch} step {global_step} (margin {}, recon {})",
                    report.margin,
                    report.recon
                );
            }

            tape.backward(&total)?;
            let grads = cx.bound.grads();
            drop(cx);
            adam.step(&mut params, &grads, lr);
            global_step += 1;

            sum_total += report.total * batch.size as f64;
            sum_margin += report.margin * batch.size as f64;
            sum_recon += report.recon * batch.size as f64;
            // batch training accuracy from the class norms
            for (row, &label) in batch.labels.iter().enumerate() {
                let norms = &report.class_norms[row * config.arch.classes..(row + 1) * config.arch.classes];
                let pred = argmax(norms);
                if pred == label {
                    correct += 1;
                }
            }
            seen += batch.size;
        }

        let eval = evaluate(&model, &mut params, test_ds, config.train.batch_size, config.train.deterministic)?;
        final_test_acc = eval.accuracy;

        let train_acc = correct as f64 / seen as f64;
        let row = format!(
            "{epoch},{global_step},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            sum_total / seen as f64,
            sum_margin / seen as f64,
            sum_recon / seen as f64,
            train_acc,
            eval.accuracy,
            start.elapsed().as_secs_f64()
        );
        metrics.push_str(&row);
        std::fs::write(&metrics_path, &metrics)?;

        let snapshot = MetricsSnapshot {
            train_loss: sum_total / seen as f64,
            train_acc,
            test_acc: eval.accuracy,
        };
        let rng = RngState { seed, epoch: epoch as u64 + 1, step: global_step };
        save_ckpt(&params, rng.clone(), Some(snapshot.clone()), &last_path)?;
        if eval.accuracy > best_test_acc {
            best_test_acc = eval.accuracy;
            save_ckpt(&params, rng, Some(snapshot), &best_path)?;
        }
    }

    Ok(TrainOutcome {
        metrics_path,
        best_path,
        last_path,
        best_test_acc,
        final_test_acc,
        global_steps: global_step,
    })
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
