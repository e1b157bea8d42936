//! Class-independent reconstruction decoder.
//!
//! The decoder consumes only the winning class capsule's activity vector;
//! the class identity is never encoded in its input and there is exactly one
//! parameter set shared by all classes. Instantiation parameters therefore
//! occupy one common space, which the perturbation and variance tools here
//! probe.

use serde::{Deserialize, Serialize};

use crate::caps::Forward;
use crate::error::{bail, Result};
use crate::params::{ParamId, Params};
use crate::tensor::{Element, Padding, Shape, Tensor};
use rand_chacha::ChaCha8Rng;

/// One winning capsule's activity vector.
#[derive(Clone, Debug)]
pub struct ActivityVector<E: Element> {
    pub values: Vec<E>,
    pub class_id: usize,
    pub norm: E,
}

/// Decoder body shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderBody {
    /// Fully connected stack with ReLU between layers and sigmoid output.
    Fc { hidden: Vec<usize> },
    /// Linear map to a `base` grid followed by stride-2 transposed
    /// convolutions (ReLU between stages, sigmoid output).
    Deconv { base: [usize; 3], channels: Vec<usize>, kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub input_dim: usize,
    /// Output image shape `[H, W, C]`.
    pub image: [usize; 3],
    pub body: DecoderBody,
    /// Mask by the true label during training (inference always uses the
    /// norm argmax).
    #[serde(default = "default_true")]
    pub mask_by_label_in_train: bool,
}

fn default_true() -> bool {
    true
}

impl DecoderConfig {
    /// Fully connected decoder for 28x28 grayscale reconstruction.
    pub fn fc_28x28(input_dim: usize) -> Self {
        DecoderConfig {
            input_dim,
            image: [28, 28, 1],
            body: DecoderBody::Fc { hidden: vec![512, 1024] },
            mask_by_label_in_train: true,
        }
    }

    /// Transposed-convolution decoder for 64x64 RGB reconstruction.
    pub fn deconv_64x64(input_dim: usize) -> Self {
        DecoderConfig {
            input_dim,
            image: [64, 64, 3],
            body: DecoderBody::Deconv { base: [4, 4, 128], channels: vec![64, 32, 16, 3], kernel: 3 },
            mask_by_label_in_train: true,
        }
    }
}

enum Stage {
    Fc { w: ParamId, b: ParamId, relu: bool },
    Reshape { dims: Vec<usize> },
    Deconv { kernel: ParamId, bias: ParamId, relu: bool },
}

/// Feed-forward reconstruction network with a single shared parameter set.
pub struct Decoder {
    pub config: DecoderConfig,
    stages: Vec<Stage>,
}

impl Decoder {
    pub fn new<E: Element>(params: &mut Params<E>, rng: &mut ChaCha8Rng, name: &str, config: DecoderConfig) -> Result<Self> {
        let [h, w, c] = config.image;
        let out_pixels = h * w * c;
        let mut stages = Vec::new();
        match &config.body {
            DecoderBody::Fc { hidden } => {
                let mut prev = config.input_dim;
                for (i, &width) in hidden.iter().enumerate() {
                    let wid = params.add_glorot(
                        format!("{name}.fc{i}.weight"),
                        Shape::new(vec![prev, width])?,
                        prev,
                        width,
                        rng,
                    )?;
                    let bid = params.add_zeros(format!("{name}.fc{i}.bias"), Shape::new(vec![width])?, true)?;
                    stages.push(Stage::Fc { w: wid, b: bid, relu: true });
                    prev = width;
                }
                let wid = params.add_glorot(
                    format!("{name}.out.weight"),
                    Shape::new(vec![prev, out_pixels])?,
                    prev,
                    out_pixels,
                    rng,
                )?;
                let bid = params.add_zeros(format!("{name}.out.bias"), Shape::new(vec![out_pixels])?, true)?;
                stages.push(Stage::Fc { w: wid, b: bid, relu: false });
            }
            DecoderBody::Deconv { base, channels, kernel } => {
                let [bh, bw, bc] = *base;
                let stages_n = channels.len();
                if bh << stages_n != h || bw << stages_n != w {
                    bail!(
                        Config,
                        "decoder {name}: base {bh}x{bw} with {stages_n} stride-2 stages cannot reach {h}x{w}"
                    );
                }
                if *channels.last().unwrap() != c {
                    bail!(Config, "decoder {name}: final stage channels {} != image channels {c}", channels.last().unwrap());
                }
                let wid = params.add_glorot(
                    format!("{name}.fc0.weight"),
                    Shape::new(vec![config.input_dim, bh * bw * bc])?,
                    config.input_dim,
                    bh * bw * bc,
                    rng,
                )?;
                let bid = params.add_zeros(format!("{name}.fc0.bias"), Shape::new(vec![bh * bw * bc])?, true)?;
                stages.push(Stage::Fc { w: wid, b: bid, relu: true });
                stages.push(Stage::Reshape { dims: vec![bh, bw, bc] });
                let mut prev_c = bc;
                for (i, &ch) in channels.iter().enumerate() {
                    let k = *kernel;
                    let kid = params.add_glorot(
                        format!("{name}.deconv{i}.kernel"),
                        Shape::new(vec![k, k, prev_c, ch])?,
                        k * k * prev_c,
                        k * k * ch,
                        rng,
                    )?;
                    let bid = params.add_zeros(format!("{name}.deconv{i}.bias"), Shape::new(vec![ch])?, true)?;
                    stages.push(Stage::Deconv { kernel: kid, bias: bid, relu: i + 1 < channels.len() });
                    prev_c = ch;
                }
            }
        }
        Ok(Decoder { config, stages })
    }

    /// Deterministic reconstruction of `v: [N, d]` into images `[N, H, W, C]`
    /// with sigmoid-bounded pixels.
    pub fn forward<E: Element>(&self, cx: &mut Forward<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
        if v.shape().rank() != 2 || v.shape().axis(1) != self.config.input_dim {
            bail!(
                ShapeMismatch,
                "decoder input must be [N, {}], got {}",
                self.config.input_dim,
                v.shape()
            );
        }
        let n = v.shape().axis(0);
        let mut cur = v.clone();
        for stage in &self.stages {
            cur = match stage {
                Stage::Fc { w, b, relu } => {
                    let flat = if cur.shape().rank() == 2 {
                        cur
                    } else {
                        let numel = cur.numel() / n;
                        cur.reshape(Shape::new(vec![n, numel])?)?
                    };
                    let y = flat.matmul(cx.bound.get(*w))?.add_bias(cx.bound.get(*b))?;
                    if *relu {
                        y.relu()?
                    } else {
                        y
                    }
                }
                Stage::Reshape { dims } => {
                    let mut full = vec![n];
                    full.extend_from_slice(dims);
                    cur.reshape(Shape::new(full)?)?
                }
                Stage::Deconv { kernel, bias, relu } => {
                    let y = cur
                        .conv_transpose2d(cx.bound.get(*kernel), 2, Padding::Same)?
                        .add_bias(cx.bound.get(*bias))?;
                    if *relu {
                        y.relu()?
                    } else {
                        y
                    }
                }
            };
        }
        let [h, w, c] = self.config.image;
        cur.sigmoid()?.reshape(Shape::new(vec![n, h, w, c])?)
    }

    /// One-off reconstruction of raw activity vectors outside any training
    /// pass (inference mode, fresh tape).
    pub fn decode<E: Element>(&self, params: &mut Params<E>, vectors: &[E], count: usize) -> Result<Vec<E>> {
        if vectors.len() != count * self.config.input_dim {
            bail!(
                ShapeMismatch,
                "decode: {} values do not form {count} vectors of dimension {}",
                vectors.len(),
                self.config.input_dim
            );
        }
        let tape = crate::tensor::Tape::new();
        let mut cx = Forward::new(tape.clone(), params, crate::caps::Mode::Infer)?;
        let v = cx.tape.var(vectors.to_vec(), Shape::new(vec![count, self.config.input_dim])?)?;
        Ok(self.forward(&mut cx, &v)?.to_vec())
    }
}

/// Select the capsule whose activity vector feeds the decoder.
///
/// With labels (training) the true-class capsule is taken; otherwise the
/// capsule with the largest norm. Ties resolve to the lowest class index.
/// Returns the winning indices and the gathered `[N, d]` tensor; only the
/// d-vector flows onward, never the class identity.
pub fn mask_winner<E: Element>(class_caps: &Tensor<E>, labels: Option<&[usize]>) -> Result<(Vec<usize>, Tensor<E>)> {
    if class_caps.shape().rank() != 3 {
        bail!(ShapeMismatch, "mask_winner expects [N, C, d], got {}", class_caps.shape());
    }
    let (n, c, d) = (
        class_caps.shape().axis(0),
        class_caps.shape().axis(1),
        class_caps.shape().axis(2),
    );
    let indices: Vec<usize> = match labels {
        Some(l) => {
            if l.len() != n {
                bail!(CountMismatch, "{} labels for batch of {n}", l.len());
            }
            if let Some(&bad) = l.iter().find(|&&x| x >= c) {
                bail!(InvalidArgument, "label {bad} out of range for {c} classes");
            }
            l.to_vec()
        }
        None => {
            let vals = class_caps.values();
            (0..n)
                .map(|s| {
                    let mut best = 0usize;
                    let mut best_norm = E::neg_infinity();
                    for cls in 0..c {
                        let base = (s * c + cls) * d;
                        let norm2: E = vals[base..base + d].iter().map(|&x| x * x).sum();
                        if norm2 > best_norm {
                            best_norm = norm2;
                            best = cls;
                        }
                    }
                    best
                })
                .collect()
        }
    };
    let gathered = class_caps.gather_caps(&indices)?;
    Ok((indices, gathered))
}

/// Extract [`ActivityVector`]s (winning capsule per sample) from class-caps
/// output values.
pub fn activity_vectors<E: Element>(class_caps: &Tensor<E>, indices: &[usize]) -> Vec<ActivityVector<E>> {
    let (c, d) = (class_caps.shape().axis(1), class_caps.shape().axis(2));
    let vals = class_caps.values();
    indices
        .iter()
        .enumerate()
        .map(|(s, &cls)| {
            let base = (s * c + cls) * d;
            let values = vals[base..base + d].to_vec();
            let norm = values.iter().map(|&x| x * x).sum::<E>().sqrt();
            ActivityVector { values, class_id: cls, norm }
        })
        .collect()
}

/// Decode `v` with `v[dim]` replaced by each of `steps` evenly spaced values
/// in `[lo, hi]` (`steps = 1` uses the midpoint). Returns one image buffer
/// per step.
pub fn perturb_sweep<E: Element>(
    decoder: &Decoder,
    params: &mut Params<E>,
    v: &ActivityVector<E>,
    dim: usize,
    range: (f64, f64),
    steps: usize,
) -> Result<Vec<Vec<E>>> {
    let d = decoder.config.input_dim;
    if dim >= d {
        bail!(InvalidArgument, "perturb dimension {dim} out of range for {d}-dimensional activity vectors");
    }
    if v.values.len() != d {
        bail!(ShapeMismatch, "activity vector has {} entries, decoder expects {d}", v.values.len());
    }
    let (lo, hi) = range;
    if lo > hi {
        bail!(InvalidArgument, "perturb range [{lo}, {hi}] is reversed");
    }
    if steps == 0 {
        bail!(InvalidArgument, "perturb sweep needs at least one step");
    }
    let mut batch = Vec::with_capacity(steps * d);
    for i in 0..steps {
        let value = if steps == 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * i as f64 / (steps - 1) as f64
        };
        let mut row = v.values.clone();
        row[dim] = E::from_f64(value);
        batch.extend_from_slice(&row);
    }
    let pixels = decoder.decode(params, &batch, steps)?;
    let per = pixels.len() / steps;
    Ok(pixels.chunks_exact(per).map(|c| c.to_vec()).collect())
}

/// Empirical per-dimension variance (unbiased, n-1) of winning activity
/// vectors, sorted descending. A single sample yields all-zero variances.
pub fn variance_rank<E: Element>(vectors: &[ActivityVector<E>]) -> Result<Vec<(usize, f64)>> {
    if vectors.is_empty() {
        bail!(InvalidArgument, "variance ranking needs a nonempty dataset");
    }
    let d = vectors[0].values.len();
    let n = vectors.len();
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(&v.values) {
            *m += x.into_f64();
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    if n > 1 {
        for v in vectors {
            for i in 0..d {
                let dx = v.values[i].into_f64() - mean[i];
                var[i] += dx * dx;
            }
        }
        for v in var.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    let mut ranked: Vec<(usize, f64)> = var.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caps::Mode;
    use crate::shape;
    use crate::tensor::{grad_check, Tape};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(99)
    }

    #[test]
    fn decode_is_deterministic_and_shaped() {
        for (cfg, want_pixels) in [
            (DecoderConfig::fc_28x28(16), 28 * 28),
            (DecoderConfig::deconv_64x64(16), 64 * 64 * 3),
        ] {
            let mut params = Params::<f32>::new();
            let mut r = rng();
            let dec = Decoder::new(&mut params, &mut r, "decoder", cfg).unwrap();
            let v = vec![0.0f32; 16];
            let a = dec.decode(&mut params, &v, 1).unwrap();
            let b = dec.decode(&mut params, &v, 1).unwrap();
            assert_eq!(a.len(), want_pixels);
            assert_eq!(a, b, "repeated decode must be bitwise identical");
            assert!(a.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn decode_same_vector_ignores_class_identity() {
        let mut params = Params::<f32>::new();
        let mut r = rng();
        let dec = Decoder::new(&mut params, &mut r, "decoder", DecoderConfig::fc_28x28(8)).unwrap();
        let values = vec![0.1f32, -0.2, 0.3, 0.0, 0.05, -0.4, 0.2, 0.15];
        let from_class_0 = ActivityVector { values: values.clone(), class_id: 0, norm: 0.5 };
        let from_class_7 = ActivityVector { values, class_id: 7, norm: 0.5 };
        let a = dec.decode(&mut params, &from_class_0.values, 1).unwrap();
        let b = dec.decode(&mut params, &from_class_7.values, 1).unwrap();
        assert_eq!(a, b, "decoder output may depend only on the d-vector");
    }

    #[test]
    fn decoder_gradient_wrt_input() {
        let mut params = Params::<f64>::new();
        let mut r = rng();
        let dec = Decoder::new(
            &mut params,
            &mut r,
            "decoder",
            DecoderConfig {
                input_dim: 6,
                image: [4, 4, 1],
                body: DecoderBody::Fc { hidden: vec![10] },
                mask_by_label_in_train: true,
            },
        )
        .unwrap();
        let params = std::cell::RefCell::new(params);
        let mut srng = StdRng::seed_from_u64(7);
        let v: Vec<f64> = (0..6).map(|_| srng.random_range(-0.5..0.5)).collect();
        let probe: Vec<f64> = (0..16).map(|_| srng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            |tape, t| {
                let mut p = params.borrow_mut();
                let mut cx = Forward::new(tape.clone(), &mut p, Mode::Infer)?;
                let img = dec.forward(&mut cx, t)?;
                let pr = tape.constant(probe.clone(), img.shape().clone())?;
                img.mul(&pr)?.sum_all()
            },
            &v,
            &shape![1, 6],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn deconv_decoder_gradient_wrt_input() {
        let mut params = Params::<f64>::new();
        let mut r = rng();
        let dec = Decoder::new(
            &mut params,
            &mut r,
            "decoder",
            DecoderConfig {
                input_dim: 4,
                image: [8, 8, 1],
                body: DecoderBody::Deconv { base: [2, 2, 8], channels: vec![4, 1], kernel: 3 },
                mask_by_label_in_train: true,
            },
        )
        .unwrap();
        let params = std::cell::RefCell::new(params);
        let mut srng = StdRng::seed_from_u64(8);
        let v: Vec<f64> = (0..4).map(|_| srng.random_range(-0.5..0.5)).collect();
        let probe: Vec<f64> = (0..64).map(|_| srng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            |tape, t| {
                let mut p = params.borrow_mut();
                let mut cx = Forward::new(tape.clone(), &mut p, Mode::Infer)?;
                let img = dec.forward(&mut cx, t)?;
                let pr = tape.constant(probe.clone(), img.shape().clone())?;
                img.mul(&pr)?.sum_all()
            },
            &v,
            &shape![1, 4],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn mask_winner_single_class_and_argmax() {
        let tape = Tape::<f64>::new();
        // C=1: that capsule regardless of mode
        let x = tape.var(vec![0.1, 0.2], shape![1, 1, 2]).unwrap();
        let (idx, g) = mask_winner(&x, None).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(g.to_vec(), vec![0.1, 0.2]);

        // norms [0.2, 0.9, 0.1] -> class 1
        let x = tape
            .var(vec![0.2, 0.0, 0.0, 0.9, 0.1, 0.0], shape![1, 3, 2])
            .unwrap();
        let (idx, g) = mask_winner(&x, None).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(g.to_vec(), vec![0.0, 0.9]);
    }

    #[test]
    fn mask_winner_tie_takes_lowest_class() {
        let tape = Tape::<f64>::new();
        let x = tape.var(vec![0.5, 0.0, 0.0, 0.5], shape![1, 2, 2]).unwrap();
        let (idx, _) = mask_winner(&x, None).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn mask_winner_labels_match_argmax_when_consistent() {
        let tape = Tape::<f64>::new();
        let x = tape
            .var(vec![0.9, 0.0, 0.1, 0.0, 0.2, 0.0, 0.8, 0.0], shape![2, 2, 2])
            .unwrap();
        let (by_argmax, ga) = mask_winner(&x, None).unwrap();
        let (by_label, gl) = mask_winner(&x, Some(&[0, 1])).unwrap();
        assert_eq!(by_argmax, by_label);
        assert_eq!(ga.to_vec(), gl.to_vec());
    }

    #[test]
    fn perturb_sweep_edges() {
        let mut params = Params::<f32>::new();
        let mut r = rng();
        let dec = Decoder::new(
            &mut params,
            &mut r,
            "decoder",
            DecoderConfig {
                input_dim: 4,
                image: [4, 4, 1],
                body: DecoderBody::Fc { hidden: vec![8] },
                mask_by_label_in_train: true,
            },
        )
        .unwrap();
        let v = ActivityVector { values: vec![0.1f32, 0.2, 0.3, 0.4], class_id: 2, norm: 0.5 };

        // k=2 with lo=hi: two identical images
        let imgs = perturb_sweep(&dec, &mut params, &v, 1, (0.05, 0.05), 2).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0], imgs[1]);

        // range [0,0] equals plain decode of the vector with dim zeroed
        let imgs = perturb_sweep(&dec, &mut params, &v, 1, (0.0, 0.0), 3).unwrap();
        let mut zeroed = v.values.clone();
        zeroed[1] = 0.0;
        let plain = dec.decode(&mut params, &zeroed, 1).unwrap();
        for img in &imgs {
            assert_eq!(img, &plain);
        }

        // default range, 11 steps
        let imgs = perturb_sweep(&dec, &mut params, &v, 3, (-0.075, 0.075), 11).unwrap();
        assert_eq!(imgs.len(), 11);

        // dim out of range
        assert!(perturb_sweep(&dec, &mut params, &v, 4, (0.0, 1.0), 2).is_err());
    }

    #[test]
    fn variance_rank_cases() {
        // one sample: all variances zero
        let one = vec![ActivityVector { values: vec![0.5f64, -0.25, 0.1], class_id: 0, norm: 0.5 }];
        let ranked = variance_rank(&one).unwrap();
        assert_eq!(ranked.len(), 3);
        assert!(ranked.iter().all(|&(_, v)| v == 0.0));

        // synthetic: dimension 3 drawn from a wider distribution ranks first
        let mut srng = StdRng::seed_from_u64(11);
        let vectors: Vec<ActivityVector<f64>> = (0..200)
            .map(|_| {
                let values: Vec<f64> = (0..8)
                    .map(|d| {
                        if d == 3 {
                            srng.random_range(-1.0..1.0)
                        } else {
                            srng.random_range(-0.05..0.05)
                        }
                    })
                    .collect();
                ActivityVector { values, class_id: 0, norm: 1.0 }
            })
            .collect();
        let ranked = variance_rank(&vectors).unwrap();
        assert_eq!(ranked[0].0, 3, "wide dimension must rank first: {ranked:?}");
        assert_eq!(ranked.len(), 8);
    }
}
