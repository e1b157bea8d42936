//! Architecture assembly: stem convolution, capsule cells, class-capsule
//! head, and the reconstruction decoder, all built from a declarative
//! [`ArchConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caps::{
    flatten_caps, CapsuleCell, CapsuleTensor, Forward, Mode,
};
use crate::config::{ArchConfig, TransformSharing};
use crate::decoder::{mask_winner, Decoder};
use crate::error::{bail, Result};
use crate::params::{ParamId, Params};
use crate::routing::RouteOptions;
use crate::tensor::{concat, Element, Padding, Shape, Tape, Tensor};

/// One row of the layer table reported by `inspect`.
#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub output: String,
    pub trainable_params: usize,
}

struct Stem {
    kernel: ParamId,
    bias: ParamId,
    bn: Option<(ParamId, ParamId, ParamId, ParamId)>,
    stride: usize,
}

/// A built capsule network. Parameters live in the paired [`Params`] store.
pub struct Model {
    pub arch: ArchConfig,
    stem: Stem,
    cells: Vec<CapsuleCell>,
    class_caps: crate::caps::ClassCaps,
    pub decoder: Decoder,
    layer_table: Vec<LayerInfo>,
    /// (height, width) entering the class-caps flatten, per contributing cell.
    flatten_grids: Vec<(usize, usize, usize)>,
    pub backbone_params: usize,
    pub decoder_params: usize,
}

/// Output of one model forward pass.
pub struct ModelOutput<E: Element> {
    /// Class capsules `[N, C, d_out]`.
    pub class_caps: Tensor<E>,
    /// Per-class activity-vector norms `[N, C]`.
    pub norms: Tensor<E>,
    /// Reconstructions `[N, H, W, C]` when the decoder ran.
    pub recon: Option<Tensor<E>>,
    /// Class index whose capsule fed the decoder, per sample.
    pub winners: Vec<usize>,
}

impl Model {
    /// Build the model and initialize parameters from `seed`. Shapes are
    /// validated cell by cell; errors name the offending layer.
    pub fn build<E: Element>(arch: &ArchConfig, seed: u64) -> Result<(Model, Params<E>)> {
        let mut params = Params::<E>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Vec::new();

        let [mut h, mut w, c_in] = arch.input;
        let [mut types, mut dim] = arch.to_caps;
        if types * dim != arch.stem.filters {
            bail!(Config, "to_caps {types}x{dim} does not match {} stem filters", arch.stem.filters);
        }

        // stem convolution
        let k = arch.stem.kernel;
        let filters = arch.stem.filters;
        let before = params.trainable_count();
        let stem_kernel = params.add_glorot(
            "stem.kernel",
            Shape::new(vec![k, k, c_in, filters])?,
            k * k * c_in,
            k * k * filters,
            &mut rng,
        )?;
        let stem_bias = params.add_zeros("stem.bias", Shape::new(vec![filters])?, true)?;
        let stem_bn = if arch.stem.batch_norm {
            Some((
                params.add_const("stem.bn.gamma", Shape::new(vec![filters])?, E::one(), true)?,
                params.add_zeros("stem.bn.beta", Shape::new(vec![filters])?, true)?,
                params.add_zeros("stem.bn.running_mean", Shape::new(vec![filters])?, false)?,
                params.add_const("stem.bn.running_var", Shape::new(vec![filters])?, E::one(), false)?,
            ))
        } else {
            None
        };
        let (sh, _) = conv_out(h, k, arch.stem.stride);
        let (sw, _) = conv_out(w, k, arch.stem.stride);
        h = sh;
        w = sw;
        table.push(LayerInfo {
            name: "stem".into(),
            output: format!("{h}x{w}x{filters} -> {types} caps x{dim}"),
            trainable_params: params.trainable_count() - before,
        });

        // capsule cells
        let mut cells = Vec::new();
        let mut grids: Vec<(usize, usize, usize)> = Vec::new();
        for (ci, cell_cfg) in arch.cells.iter().enumerate() {
            let name = format!("cell{ci}");
            let before = params.trainable_count();
            let conv_opts = RouteOptions {
                iterations: cell_cfg.routing_iterations,
                full_grad: arch.routing_full_grad,
                softmax_over_children: arch.conv_routing_softmax_over_children,
            };
            let cell = CapsuleCell::new(&mut params, &mut rng, &name, types, dim, cell_cfg, conv_opts)
                .map_err(|e| crate::Error::Config(format!("cell {ci}: {e}")))?;
            // shape walk: every layer strides the grid; the cell output keeps
            // the final layer's grid
            let mut ch = h;
            let mut cw = w;
            let mut shapes: Vec<(usize, usize)> = Vec::new();
            for lc in &cell_cfg.layers {
                let (nh, _) = conv_out(ch, lc.kernel, lc.stride);
                let (nw, _) = conv_out(cw, lc.kernel, lc.stride);
                ch = nh;
                cw = nw;
                shapes.push((ch, cw));
            }
            let (skip_h, skip_w) = shapes[cell_cfg.skip_from];
            let (out_h, out_w) = *shapes.last().expect("cells have layers");
            let last = cell_cfg.layers.last().expect("cells have layers");
            let skip_layer = &cell_cfg.layers[cell_cfg.skip_from];
            if (skip_h, skip_w, skip_layer.types, skip_layer.dim) != (out_h, out_w, last.types, last.dim) {
                bail!(
                    Config,
                    "cell {ci}: skip source (layer {}) produces {skip_h}x{skip_w} {}x{} but the final layer produces {out_h}x{out_w} {}x{}",
                    cell_cfg.skip_from,
                    skip_layer.types,
                    skip_layer.dim,
                    last.types,
                    last.dim
                );
            }
            h = out_h;
            w = out_w;
            types = last.types;
            dim = last.dim;
            grids.push((h, w, types));
            table.push(LayerInfo {
                name: name.clone(),
                output: format!("{h}x{w} grid, {types} caps x{dim}{}", if cell_cfg.routed { ", routed" } else { "" }),
                trainable_params: params.trainable_count() - before,
            });
            cells.push(cell);
        }

        // class capsules over flattened cell outputs
        let flatten_grids: Vec<(usize, usize, usize)> = if arch.class_caps.flatten_last_two_cells {
            if grids.len() < 2 {
                bail!(Config, "flatten_last_two_cells needs at least two cells");
            }
            // cells must agree on capsule dimension for concatenation
            let d_prev = arch.cells[arch.cells.len() - 2].layers.last().unwrap().dim;
            if d_prev != dim {
                bail!(Config, "flatten_last_two_cells: capsule dims differ ({d_prev} vs {dim})");
            }
            grids[grids.len() - 2..].to_vec()
        } else {
            vec![*grids.last().expect("at least one cell")]
        };
        let in_caps: usize = flatten_grids.iter().map(|&(gh, gw, gt)| gh * gw * gt).sum();
        let groups = match arch.class_caps.transform_sharing {
            TransformSharing::None => None,
            TransformSharing::PerType => {
                // flat order is (h, w, type); spatial positions of one type
                // share a group, offset per contributing cell
                let mut g = Vec::with_capacity(in_caps);
                let mut offset = 0usize;
                for &(gh, gw, gt) in &flatten_grids {
                    for _ in 0..gh * gw {
                        for t in 0..gt {
                            g.push(offset + t);
                        }
                    }
                    offset += gt;
                }
                Some(g)
            }
        };
        let before = params.trainable_count();
        let cc_opts = RouteOptions {
            iterations: arch.class_caps.iterations,
            full_grad: arch.routing_full_grad,
            softmax_over_children: arch.class_caps.softmax_over_children,
        };
        let class_caps = crate::caps::ClassCaps::with_options(
            &mut params,
            &mut rng,
            "class_caps",
            in_caps,
            dim,
            arch.classes,
            arch.class_caps.out_dim,
            cc_opts,
            groups,
        )?;
        table.push(LayerInfo {
            name: "class_caps".into(),
            output: format!("{} classes x{}", arch.classes, arch.class_caps.out_dim),
            trainable_params: params.trainable_count() - before,
        });
        let backbone_params = params.trainable_count();

        // decoder
        if arch.decoder.input_dim != arch.class_caps.out_dim {
            bail!(
                Config,
                "decoder input dim {} does not match class capsule dim {}",
                arch.decoder.input_dim,
                arch.class_caps.out_dim
            );
        }
        let before = params.trainable_count();
        let decoder = Decoder::new(&mut params, &mut rng, "decoder", arch.decoder.clone())?;
        let decoder_params = params.trainable_count() - before;
        table.push(LayerInfo {
            name: "decoder".into(),
            output: format!("{}x{}x{} image", arch.decoder.image[0], arch.decoder.image[1], arch.decoder.image[2]),
            trainable_params: decoder_params,
        });

        Ok((
            Model {
                arch: arch.clone(),
                stem: Stem { kernel: stem_kernel, bias: stem_bias, bn: stem_bn, stride: arch.stem.stride },
                cells,
                class_caps,
                decoder,
                layer_table: table,
                flatten_grids,
                backbone_params,
                decoder_params,
            },
            params,
        ))
    }

    pub fn layer_table(&self) -> &[LayerInfo] {
        &self.layer_table
    }

    pub fn decoder_image(&self) -> [usize; 3] {
        self.arch.decoder.image
    }

    pub fn total_params(&self) -> usize {
        self.backbone_params + self.decoder_params
    }

    /// Forward pass over an image batch.
    ///
    /// `labels` masks the decoder input by the true class (training); without
    /// labels the winner is the norm argmax. `with_decoder: false` skips
    /// reconstruction entirely (evaluation).
    pub fn forward<E: Element>(
        &self,
        cx: &mut Forward<E>,
        images: &Tensor<E>,
        labels: Option<&[usize]>,
        with_decoder: bool,
    ) -> Result<ModelOutput<E>> {
        let [ih, iw, ic] = self.arch.input;
        let dims = images.shape().dims();
        if dims.len() != 4 || dims[1] != ih || dims[2] != iw || dims[3] != ic {
            bail!(ShapeMismatch, "model expects [N,{ih},{iw},{ic}] input, got {}", images.shape());
        }

        // stem: conv + bias + bn + relu
        let kernel = cx.bound.get(self.stem.kernel).clone();
        let bias = cx.bound.get(self.stem.bias).clone();
        let mut y = images.conv2d(&kernel, self.stem.stride, Padding::Same)?.add_bias(&bias)?;
        if let Some((gamma, beta, rmean, rvar)) = self.stem.bn {
            y = match cx.mode {
                Mode::Train => {
                    let g = cx.bound.get(gamma).clone();
                    let b = cx.bound.get(beta).clone();
                    let (out, bm, bv) = y.batchnorm_train(&g, &b, E::from_f64(1e-5))?;
                    let mom = E::from_f64(0.1);
                    let keep = E::one() - mom;
                    for (r, &v) in cx.params.data_mut(rmean).iter_mut().zip(&bm) {
                        *r = keep * *r + mom * v;
                    }
                    for (r, &v) in cx.params.data_mut(rvar).iter_mut().zip(&bv) {
                        *r = keep * *r + mom * v;
                    }
                    out
                }
                Mode::Infer => {
                    let g = cx.params.data(gamma).to_vec();
                    let b = cx.params.data(beta).to_vec();
                    let rm = cx.params.data(rmean).to_vec();
                    let rv = cx.params.data(rvar).to_vec();
                    y.batchnorm_infer(&g, &b, &rm, &rv, E::from_f64(1e-5))?
                }
            };
        }
        let y = y.relu()?;
        let [types, dim] = self.arch.to_caps;
        let mut caps = CapsuleTensor::from_channels(&y, types, dim)?;

        // capsule cells, remembering outputs that feed the class head
        let keep_from = self.cells.len() - self.flatten_grids.len();
        let mut flat_parts: Vec<Tensor<E>> = Vec::new();
        for (i, cell) in self.cells.iter().enumerate() {
            caps = cell.forward(cx, &caps)?;
            if i >= keep_from {
                flat_parts.push(flatten_caps(&caps)?);
            }
        }
        let capsule_list = if flat_parts.len() == 1 {
            flat_parts.pop().expect("one part")
        } else {
            let refs: Vec<&Tensor<E>> = flat_parts.iter().collect();
            concat(&refs, 1)?
        };

        let class_caps = self.class_caps.forward(cx, &capsule_list)?;
        let norms = class_caps.caps_norm()?;

        let (winners, recon) = if with_decoder {
            let mask_labels = match (cx.mode, self.arch.decoder.mask_by_label_in_train) {
                (Mode::Train, true) => labels,
                _ => None,
            };
            let (winners, gathered) = mask_winner(&class_caps, mask_labels)?;
            let recon = self.decoder.forward(cx, &gathered)?;
            (winners, Some(recon))
        } else {
            let (winners, _) = mask_winner(&class_caps, None)?;
            (winners, None)
        };

        Ok(ModelOutput { class_caps, norms, recon, winners })
    }

    /// Convenience inference pass on a fresh tape.
    pub fn infer<E: Element>(
        &self,
        params: &mut Params<E>,
        images: &[E],
        batch: usize,
        deterministic: bool,
        with_decoder: bool,
    ) -> Result<(Tape<E>, ModelOutput<E>)> {
        let [ih, iw, ic] = self.arch.input;
        let tape = if deterministic { Tape::deterministic() } else { Tape::new() };
        let mut cx = Forward::new(tape.clone(), params, Mode::Infer)?;
        let x = cx.tape.var(images.to_vec(), Shape::new(vec![batch, ih, iw, ic])?)?;
        let out = self.forward(&mut cx, &x, None, with_decoder)?;
        Ok((tape, out))
    }
}

fn conv_out(input: usize, _kernel: usize, stride: usize) -> (usize, usize) {
    // same padding everywhere in the backbone
    (input.div_ceil(stride), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn cifar10_deep_parameter_count_near_7_22m() {
        let cfg = RunConfig::cifar10_deep();
        let (model, params) = Model::build::<f32>(&cfg.arch, 1).unwrap();
        let total = params.trainable_count();
        assert_eq!(total, model.total_params());
        let target = 7.22e6;
        let rel = (total as f64 - target) / target;
        assert!(rel.abs() <= 0.05, "total {total} is {:.2}% from 7.22M", rel * 100.0);
    }

    #[test]
    fn toy_config_count_matches_hand_sum() {
        let mut cfg = RunConfig::mnist_desk();
        cfg.arch.stem = crate::config::StemConfig { filters: 8, kernel: 3, stride: 1, batch_norm: false };
        cfg.arch.to_caps = [2, 4];
        cfg.arch.cells = vec![crate::caps::CellConfig {
            layers: vec![
                crate::caps::CapsLayerConfig { kernel: 3, stride: 2, types: 2, dim: 4, batch_norm: false },
                crate::caps::CapsLayerConfig { kernel: 3, stride: 1, types: 2, dim: 4, batch_norm: false },
            ],
            skip_from: 0,
            routed: false,
            routing_iterations: 3,
        }];
        cfg.arch.class_caps.out_dim = 8;
        cfg.arch.class_caps.flatten_last_two_cells = false;
        cfg.arch.decoder = crate::decoder::DecoderConfig {
            input_dim: 8,
            image: [28, 28, 1],
            body: crate::decoder::DecoderBody::Fc { hidden: vec![16] },
            mask_by_label_in_train: true,
        };
        let (_, params) = Model::build::<f32>(&cfg.arch, 1).unwrap();
        // stem: 3*3*1*8 + 8 = 80
        // cell layers: (3*3*8*8 + 8) * 2 = 1168
        // class caps: 14*14*2 = 392 caps -> 392*10*4*8 = 125440
        // decoder: 8*16+16 + 16*784+784 = 144 + 13328 = 13472
        let want = 80 + 1168 + 125_440 + 13_472;
        assert_eq!(params.trainable_count(), want);
    }

    #[test]
    fn invalid_skip_index_names_cell() {
        let mut cfg = RunConfig::mnist_desk();
        cfg.arch.cells[1].skip_from = 5;
        let err = match Model::build::<f32>(&cfg.arch, 1) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("invalid skip index accepted"),
        };
        assert!(err.contains("cell 1"), "{err}");
    }

    #[test]
    fn mismatched_skip_shape_names_cell() {
        let mut cfg = RunConfig::mnist_desk();
        // make the skip source differ in capsule count from the final layer
        cfg.arch.cells[0].layers[0].types = 4;
        cfg.arch.cells[0].layers[0].dim = 8;
        let err = match Model::build::<f32>(&cfg.arch, 1) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("mismatched skip shape accepted"),
        };
        assert!(err.contains("cell 0") && err.contains("skip source"), "{err}");
    }

    #[test]
    fn param_count_is_pure_function_of_arch() {
        let cfg = RunConfig::mnist_desk();
        let (_, p1) = Model::build::<f32>(&cfg.arch, 1).unwrap();
        let (_, p2) = Model::build::<f32>(&cfg.arch, 999).unwrap();
        assert_eq!(p1.trainable_count(), p2.trainable_count());
    }

    #[test]
    fn forward_shapes_and_winners() {
        let mut cfg = RunConfig::mnist_desk();
        cfg.arch.class_caps.out_dim = 16;
        cfg.arch.decoder = crate::decoder::DecoderConfig::fc_28x28(16);
        let (model, mut params) = Model::build::<f32>(&cfg.arch, 3).unwrap();
        let images = vec![0.5f32; 2 * 28 * 28];
        let (_tape, out) = model.infer(&mut params, &images, 2, true, true).unwrap();
        assert_eq!(out.class_caps.shape().dims(), &[2, 10, 16]);
        assert_eq!(out.norms.shape().dims(), &[2, 10]);
        assert_eq!(out.recon.as_ref().unwrap().shape().dims(), &[2, 28, 28, 1]);
        assert_eq!(out.winners.len(), 2);
    }
}
