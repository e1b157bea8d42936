//! Run configuration: dataset, architecture, loss, optimizer, and training
//! settings. Everything is TOML-serializable; a run is reproducible from
//! its config plus seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caps::{CapsLayerConfig, CellConfig};
use crate::decoder::DecoderConfig;
use crate::error::{bail, Result};
use crate::losses::MarginParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// `mnist`, `fashion-mnist`, or `cifar10`.
    pub name: String,
    /// Directory holding the dataset files (IDX pair or CIFAR-10 binary
    /// batches). Overridable from the CLI.
    pub data_dir: Option<PathBuf>,
    /// Upsample 32x32x3 inputs to 64x64x3 at load time.
    #[serde(default)]
    pub resize_to_64: bool,
    /// Random-shift augmentation amplitude in pixels (train split only).
    #[serde(default)]
    pub max_shift: usize,
    /// Random horizontal flips (train split only).
    #[serde(default)]
    pub flip: bool,
    /// Truncate the train split (desk-scale runs).
    #[serde(default)]
    pub limit_train: Option<usize>,
    /// Truncate the test split.
    #[serde(default)]
    pub limit_test: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransformSharing {
    #[default]
    None,
    PerType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCapsConfig {
    pub out_dim: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Normalize couplings over the child axis (default) or parent axis.
    #[serde(default = "default_true")]
    pub softmax_over_children: bool,
    #[serde(default)]
    pub transform_sharing: TransformSharing,
    /// Feed the flattened outputs of the last two cells instead of only the
    /// final cell.
    #[serde(default)]
    pub flatten_last_two_cells: bool,
}

fn default_true() -> bool {
    true
}

fn default_iterations() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Input image shape `[H, W, C]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub stem: StemConfig,
    /// Capsule view of the stem output: `[types, dim]` with
    /// `types * dim = stem.filters`.
    pub to_caps: [usize; 2],
    pub cells: Vec<CellConfig>,
    pub class_caps: ClassCapsConfig,
    pub decoder: DecoderConfig,
    /// Differentiate through all routing iterations instead of the final one.
    #[serde(default)]
    pub routing_full_grad: bool,
    /// Softmax axis for the routed convolutional layer (parents by default).
    #[serde(default)]
    pub conv_routing_softmax_over_children: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Multiplicative learning-rate decay per epoch.
    #[serde(default = "default_decay")]
    pub decay: f64,
}

fn default_kind() -> String {
    "adam".to_string()
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_decay() -> f64 {
    0.96
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_kind(),
            learning_rate: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            decay: default_decay(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    #[serde(default)]
    pub margin: MarginParams,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| crate::Error::Config(format!("config parse: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| crate::Error::Config(format!("config serialize: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        let [_, _, ch] = self.arch.input;
        let [t, d] = self.arch.to_caps;
        if t * d != self.arch.stem.filters {
            bail!(Config, "to_caps {t}x{d} does not match {} stem filters", self.arch.stem.filters);
        }
        if self.arch.cells.is_empty() {
            bail!(Config, "architecture needs at least one capsule cell");
        }
        if ch == 0 || self.train.batch_size == 0 {
            bail!(Config, "input channels and batch size must be >= 1");
        }
        if self.optimizer.kind != "adam" {
            bail!(Config, "unsupported optimizer kind {:?}", self.optimizer.kind);
        }
        Ok(())
    }

    /// Named presets: `mnist-desk`, `mnist-desk-subset`, `fashion-desk`,
    /// `cifar10-deep`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist-desk" => Ok(Self::mnist_desk()),
            "mnist-desk-subset" => Ok(Self::mnist_desk_subset()),
            "fashion-desk" => {
                let mut c = Self::mnist_desk();
                c.dataset.name = "fashion-mnist".into();
                Ok(c)
            }
            "cifar10-deep" => Ok(Self::cifar10_deep()),
            other => bail!(Config, "unknown preset {other:?} (try mnist-desk, mnist-desk-subset, fashion-desk, cifar10-deep)"),
        }
    }

    /// Reduced two-cell model with a routed head, desk-scale trainable on
    /// full MNIST.
    pub fn mnist_desk() -> Self {
        let layer = |stride: usize, types: usize, dim: usize| CapsLayerConfig {
            kernel: 3,
            stride,
            types,
            dim,
            batch_norm: true,
        };
        RunConfig {
            dataset: DatasetConfig {
                name: "mnist".into(),
                data_dir: None,
                resize_to_64: false,
                max_shift: 2,
                flip: false,
                limit_train: None,
                limit_test: None,
            },
            arch: ArchConfig {
                input: [28, 28, 1],
                classes: 10,
                stem: StemConfig { filters: 32, kernel: 3, stride: 1, batch_norm: true },
                to_caps: [8, 4],
                cells: vec![
                    CellConfig {
                        layers: vec![layer(2, 8, 4), layer(1, 8, 4), layer(1, 8, 4)],
                        skip_from: 0,
                        routed: false,
                        routing_iterations: 3,
                    },
                    CellConfig {
                        layers: vec![layer(2, 8, 8), layer(1, 8, 8), layer(1, 8, 8)],
                        skip_from: 0,
                        routed: true,
                        routing_iterations: 3,
                    },
                ],
                class_caps: ClassCapsConfig {
                    out_dim: 32,
                    iterations: 3,
                    softmax_over_children: true,
                    transform_sharing: TransformSharing::None,
                    flatten_last_two_cells: false,
                },
                decoder: DecoderConfig::fc_28x28(32),
                routing_full_grad: false,
                conv_routing_softmax_over_children: false,
            },
            margin: MarginParams::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainSettings {
                epochs: 3,
                batch_size: 128,
                seed: 7,
                deterministic: true,
                out_dir: PathBuf::from("runs/mnist-desk"),
            },
        }
    }

    /// The desk model on a 10k-sample subset (more epochs, same budget).
    pub fn mnist_desk_subset() -> Self {
        let mut c = Self::mnist_desk();
        c.dataset.limit_train = Some(10_000);
        c.train.epochs = 6;
        c.train.out_dir = PathBuf::from("runs/mnist-desk-subset");
        c
    }

    /// Full-depth architecture for 64x64x3 inputs: four skip-connected
    /// capsule cells, 3-D-convolution routing in the last cell, 32-dim class
    /// capsules, transposed-convolution decoder.
    pub fn cifar10_deep() -> Self {
        let layer = |stride: usize, types: usize, dim: usize| CapsLayerConfig {
            kernel: 3,
            stride,
            types,
            dim,
            batch_norm: true,
        };
        let cell = |types: usize, dim: usize, routed: bool| CellConfig {
            layers: vec![
                layer(2, types, dim),
                layer(1, types, dim),
                layer(1, types, dim),
                layer(1, types, dim),
            ],
            skip_from: 0,
            routed,
            routing_iterations: 3,
        };
        RunConfig {
            dataset: DatasetConfig {
                name: "cifar10".into(),
                data_dir: None,
                resize_to_64: true,
                max_shift: 4,
                flip: true,
                limit_train: None,
                limit_test: None,
            },
            arch: ArchConfig {
                input: [64, 64, 3],
                classes: 10,
                stem: StemConfig { filters: 128, kernel: 3, stride: 1, batch_norm: true },
                to_caps: [32, 4],
                cells: vec![cell(32, 4, false), cell(32, 8, false), cell(32, 8, false), cell(32, 8, true)],
                class_caps: ClassCapsConfig {
                    out_dim: 32,
                    iterations: 3,
                    softmax_over_children: true,
                    transform_sharing: TransformSharing::PerType,
                    flatten_last_two_cells: true,
                },
                decoder: DecoderConfig::deconv_64x64(32),
                routing_full_grad: false,
                conv_routing_softmax_over_children: false,
            },
            margin: MarginParams::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainSettings {
                epochs: 50,
                batch_size: 64,
                seed: 7,
                deterministic: true,
                out_dir: PathBuf::from("runs/cifar10-deep"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["mnist-desk", "mnist-desk-subset", "fashion-desk", "cifar10-deep"] {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::mnist_desk();
        let text = c.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn bad_to_caps_rejected() {
        let mut c = RunConfig::mnist_desk();
        c.arch.to_caps = [7, 5];
        assert!(c.validate().is_err());
    }
}
