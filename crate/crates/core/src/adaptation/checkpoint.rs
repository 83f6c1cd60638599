//! Checkpoint directory: `meta.json` plus `params.bin`.
//!
//! `params.bin` is the magic `QACK`, a little-endian `u32` version, then for
//! every tensor listed in the metadata a `u32` row count, a `u32` column count
//! and `rows * cols` little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterMode, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, to_f64};
use crate::selection::ClassSet;
use crate::text::{canonical_class, EncoderBackend, ToyEncoderConfig, ToyTextEncoder, TokenVocab};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QACK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";

pub const CONTEXT_TENSOR: &str = "context";
pub const RESIDUAL_WEIGHT_TENSOR: &str = "residual_weight";
pub const RESIDUAL_BIAS_TENSOR: &str = "residual_bias";

/// Enough to rebuild the frozen encoder the checkpoint was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Toy { config: ToyEncoderConfig, vocab: TokenVocab },
    Http { endpoint: String, dim: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: &str, rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor {name} has the wrong length");
        Self {
            name: name.to_string(),
            rows,
            cols,
            data,
        }
    }

    fn spec(&self) -> TensorSpec {
        TensorSpec {
            name: self.name.clone(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub mode: AdapterMode,
    pub seed: u64,
    pub config: TrainConfig,
    pub class_set: ClassSet,
    /// Classes the softmax ran over, targets first.
    pub classes: Vec<String>,
    pub encoder: EncoderSpec,
    /// Mean loss of every completed epoch.
    pub loss_trace: Vec<f64>,
    pub training_items: usize,
    pub clamped_weights: usize,
    pub tensors: Vec<TensorSpec>,
    /// Snapshot of the surrounding run configuration, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

impl AdapterCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn mode(&self) -> AdapterMode {
        self.meta.mode
    }

    pub fn output_dim(&self) -> usize {
        match &self.meta.encoder {
            EncoderSpec::Toy { config, .. } => config.output_dim,
            EncoderSpec::Http { dim, .. } => *dim,
        }
    }

    pub fn toy_encoder(&self) -> Option<ToyTextEncoder> {
        match &self.meta.encoder {
            EncoderSpec::Toy { config, vocab } => Some(ToyTextEncoder::new(config.clone(), vocab.clone())),
            EncoderSpec::Http { .. } => None,
        }
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::malformed(PARAMS_FILE, format!("checkpoint has no {name} tensor")))
    }

    /// Class features as the adapted model sees them. `backend` supplies the
    /// frozen base features for residual checkpoints over a remote encoder
    /// and is ignored otherwise.
    pub fn class_features(&self, classes: &[String], backend: Option<&EncoderBackend>) -> Result<Vec<Vec<f64>>> {
        let targets: Vec<String> = self.meta.class_set.targets.iter().map(|t| canonical_class(t)).collect();
        let foreign: Vec<&str> = classes
            .iter()
            .filter(|c| !targets.contains(&canonical_class(c)))
            .map(String::as_str)
            .collect();
        if !foreign.is_empty() {
            log::warn!(
                "{} classes are not targets of this checkpoint and are encoded anyway: {}",
                foreign.len(),
                foreign.join(", ")
            );
        }
        let base = match (&self.meta.encoder, backend) {
            (EncoderSpec::Toy { .. }, _) => {
                let encoder = self.toy_encoder().expect("toy spec");
                let context = to_f64(&self.require(CONTEXT_TENSOR)?.data);
                classes
                    .iter()
                    .map(|c| encoder.encode(&context, c))
                    .collect::<Result<Vec<_>>>()?
            }
            (EncoderSpec::Http { .. }, Some(b @ EncoderBackend::Http(_))) => b.encode_classes(classes)?,
            (EncoderSpec::Http { endpoint, .. }, _) => {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint was trained against the text encoder at {endpoint}; an HTTP backend is required"
                )))
            }
        };
        match self.meta.mode {
            AdapterMode::Prompt => Ok(base.iter().map(|f| l2_normalize(f)).collect()),
            AdapterMode::Residual => {
                let w = self.require(RESIDUAL_WEIGHT_TENSOR)?;
                let b = self.require(RESIDUAL_BIAS_TENSOR)?;
                let mut params = to_f64(&w.data);
                params.extend(to_f64(&b.data));
                let dim = b.cols;
                for f in &base {
                    if f.len() != dim {
                        return Err(Error::DimMismatch {
                            expected: dim,
                            got: f.len(),
                        });
                    }
                }
                Ok(super::residual_features(&params, &base).0)
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = self.meta.clone();
        meta.tensors = self.tensors.iter().map(Tensor::spec).collect();
        let json = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for t in &self.tensors {
            bytes.extend_from_slice(&(t.rows as u32).to_le_bytes());
            bytes.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let params_path = dir.join(PARAMS_FILE);
        fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.to_path_buf()));
        }
        let meta_path = dir.join(META_FILE);
        let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| Error::malformed(META_FILE, e.to_string()))?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                file: META_FILE.into(),
                found: meta.format_version,
            });
        }

        let params_path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let bad = |reason: String| Error::malformed(PARAMS_FILE, reason);
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                file: PARAMS_FILE.into(),
                expected: "QACK".into(),
            });
        }
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| bad("truncated".into()))
        };
        let version = word(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                file: PARAMS_FILE.into(),
                found: version,
            });
        }
        let mut at = 8;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for spec in &meta.tensors {
            let rows = word(at)? as usize;
            let cols = word(at + 4)? as usize;
            at += 8;
            if rows != spec.rows || cols != spec.cols {
                return Err(bad(format!(
                    "tensor {} is {rows}x{cols}, metadata says {}x{}",
                    spec.name, spec.rows, spec.cols
                )));
            }
            let len = rows * cols * 4;
            let payload = bytes.get(at..at + len).ok_or_else(|| bad("truncated".into()))?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor {} has non-finite values", spec.name)));
            }
            at += len;
            tensors.push(Tensor::new(&spec.name, rows, cols, data));
        }
        if at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Self { meta, tensors })
    }
}
