//! Checkpoint serialization: a self-describing text+JSON header followed by
//! the raw little-endian 32-bit float parameter payload in declaration
//! order. Save -> load -> save is bitwise lossless.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ArchConfig;
use crate::error::{bail, Result};
use crate::losses::MarginParams;
use crate::model::Model;
use crate::params::Params;
use crate::tensor::Shape;

const MAGIC_PREFIX: &str = "capsnet-checkpoint v";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub trainable: bool,
}

/// Training-position marker: the shuffle/augmentation streams are derived
/// from `(seed, epoch, step)`, so this triple pins the RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub margin: MarginParams,
    pub rng: RngState,
    pub metrics: Option<MetricsSnapshot>,
    pub manifest: Vec<ParamManifestEntry>,
    pub payload_f32_len: usize,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params<f32>,
}

impl Checkpoint {
    pub fn from_params(
        arch: &ArchConfig,
        margin: &MarginParams,
        rng: RngState,
        metrics: Option<MetricsSnapshot>,
        params: &Params<f32>,
    ) -> Checkpoint {
        let manifest: Vec<ParamManifestEntry> = params
            .entries()
            .iter()
            .map(|e| ParamManifestEntry {
                name: e.name.clone(),
                dims: e.shape.dims().to_vec(),
                trainable: e.trainable,
            })
            .collect();
        let payload_f32_len = params.entries().iter().map(|e| e.data.len()).sum();
        let mut copy = Params::new();
        for e in params.entries() {
            copy.add(e.name.clone(), e.shape.clone(), e.data.clone(), e.trainable)
                .expect("same entries revalidate");
        }
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                arch: arch.clone(),
                margin: *margin,
                rng,
                metrics,
                manifest,
                payload_f32_len,
            },
            params: copy,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header_json =
            serde_json::to_string(&self.header).map_err(|e| crate::Error::CorruptHeader(format!("serialize: {e}")))?;
        let mut out = Vec::new();
        write!(out, "{MAGIC_PREFIX}{FORMAT_VERSION}\nheader-bytes: {}\n", header_json.len())?;
        out.extend_from_slice(header_json.as_bytes());
        for e in self.params.entries() {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        // line 1: magic + version
        let nl1 = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| crate::Error::CorruptHeader("missing first line".into()))?;
        let line1 = std::str::from_utf8(&bytes[..nl1])
            .map_err(|_| crate::Error::CorruptHeader("first line is not UTF-8".into()))?;
        let version_str = line1
            .strip_prefix(MAGIC_PREFIX)
            .ok_or_else(|| crate::Error::CorruptHeader(format!("not a checkpoint file (line {line1:?})")))?;
        let version: u32 = version_str
            .parse()
            .map_err(|_| crate::Error::CorruptHeader(format!("unparseable version {version_str:?}")))?;
        if version != FORMAT_VERSION {
            bail!(VersionMismatch, "checkpoint format v{version}, this build reads v{FORMAT_VERSION}");
        }
        // line 2: header byte count
        let rest = &bytes[nl1 + 1..];
        let nl2 = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| crate::Error::CorruptHeader("missing header-bytes line".into()))?;
        let line2 = std::str::from_utf8(&rest[..nl2])
            .map_err(|_| crate::Error::CorruptHeader("header-bytes line is not UTF-8".into()))?;
        let count: usize = line2
            .strip_prefix("header-bytes: ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| crate::Error::CorruptHeader(format!("bad header-bytes line {line2:?}")))?;
        let header_start = nl1 + 1 + nl2 + 1;
        if bytes.len() < header_start + count {
            bail!(Truncated, "file ends inside the header");
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[header_start..header_start + count])
            .map_err(|e| crate::Error::CorruptHeader(format!("header JSON: {e}")))?;
        // payload
        let payload = &bytes[header_start + count..];
        let want = header.payload_f32_len * 4;
        if payload.len() < want {
            bail!(Truncated, "parameter payload holds {} bytes, header promises {want}", payload.len());
        }
        if payload.len() > want {
            bail!(CorruptHeader, "{} trailing bytes after the parameter payload", payload.len() - want);
        }
        let mut params = Params::new();
        let mut offset = 0usize;
        for m in &header.manifest {
            let shape = Shape::new(m.dims.clone())?;
            let n = shape.numel();
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let b = &payload[(offset + i) * 4..(offset + i) * 4 + 4];
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            offset += n;
            params.add(m.name.clone(), shape, data, m.trainable)?;
        }
        if offset != header.payload_f32_len {
            bail!(CorruptHeader, "manifest covers {offset} floats, header promises {}", header.payload_f32_len);
        }
        Ok(Checkpoint { header, params })
    }

    /// Rebuild the model this checkpoint describes and install its weights.
    /// The freshly built registry must match the manifest exactly.
    pub fn build_model(&self) -> Result<(Model, Params<f32>)> {
        let (model, mut params) = Model::build::<f32>(&self.header.arch, self.header.rng.seed)?;
        if params.len() != self.params.len() {
            bail!(
                ArchMismatch,
                "architecture registers {} parameter tensors, checkpoint holds {}",
                params.len(),
                self.params.len()
            );
        }
        for id in 0..params.len() {
            let fresh = params.entry(id);
            let stored = self.params.entry(id);
            if fresh.name != stored.name || fresh.shape != stored.shape {
                bail!(
                    ArchMismatch,
                    "parameter {} ({}) does not match checkpoint entry {} ({})",
                    fresh.name,
                    fresh.shape,
                    stored.name,
                    stored.shape
                );
            }
        }
        for id in 0..params.len() {
            let data = self.params.data(id).to_vec();
            *params.data_mut(id) = data;
        }
        Ok((model, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::Model;

    fn small_checkpoint() -> Checkpoint {
        let mut cfg = RunConfig::mnist_desk();
        cfg.arch.class_caps.out_dim = 8;
        cfg.arch.decoder = crate::decoder::DecoderConfig {
            input_dim: 8,
            image: [28, 28, 1],
            body: crate::decoder::DecoderBody::Fc { hidden: vec![16] },
            mask_by_label_in_train: true,
        };
        let (_, params) = Model::build::<f32>(&cfg.arch, 5).unwrap();
        Checkpoint::from_params(
            &cfg.arch,
            &cfg.margin,
            RngState { seed: 5, epoch: 0, step: 0 },
            None,
            &params,
        )
    }

    #[test]
    fn save_load_save_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = small_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn flipped_version_byte_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = small_checkpoint();
        ck.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // first line is "capsnet-checkpoint v1"
        let vpos = bytes.iter().position(|&b| b == b'1').unwrap();
        bytes[vpos] = b'9';
        let err = match Checkpoint::from_bytes(&bytes) {
            Err(e) => e,
            Ok(_) => panic!("flipped version accepted"),
        };
        assert_eq!(err.class(), "version-mismatch");
    }

    #[test]
    fn truncated_payload_is_truncation_error() {
        let ck = small_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 5);
        let err = match Checkpoint::from_bytes(&bytes) {
            Err(e) => e,
            Ok(_) => panic!("truncated payload accepted"),
        };
        assert_eq!(err.class(), "truncated");
    }

    #[test]
    fn mangled_header_is_corrupt_header_error() {
        let ck = small_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // damage the JSON (first '{' -> '[')
        let pos = bytes.iter().position(|&b| b == b'{').unwrap();
        bytes[pos] = b'[';
        let err = match Checkpoint::from_bytes(&bytes) {
            Err(e) => e,
            Ok(_) => panic!("mangled header accepted"),
        };
        assert_eq!(err.class(), "corrupt-header");
    }

    #[test]
    fn rebuild_restores_weights_exactly() {
        let ck = small_checkpoint();
        let (_, rebuilt) = ck.build_model().unwrap();
        for id in 0..rebuilt.len() {
            assert_eq!(rebuilt.data(id), ck.params.data(id));
        }
    }

    #[test]
    fn architecture_mismatch_detected() {
        let ck = small_checkpoint();
        let mut other = RunConfig::mnist_desk();
        other.arch.class_caps.out_dim = 16;
        other.arch.decoder = crate::decoder::DecoderConfig::fc_28x28(16);
        let (_, params) = Model::build::<f32>(&other.arch, 5).unwrap();
        let wrong = Checkpoint::from_params(
            &other.arch,
            &other.margin,
            RngState { seed: 5, epoch: 0, step: 0 },
            None,
            &params,
        );
        // store the wrong params against the original arch: rebuild must fail
        let franken = Checkpoint { header: ck.header.clone(), params: wrong.params };
        assert!(franken.build_model().is_err());
    }
}
