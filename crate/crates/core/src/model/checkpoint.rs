//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (architecture, metadata, tensor names and shapes), then every
//! tensor as little-endian `f32` in header order.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::nn::Tensor;

use super::{InputNorm, ModelConfig, ModelError, Mvitime};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MVITIME\0";

/// How two pre-trained networks are joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Weighted sum of backbone features into a fresh classifier (MViTime+).
    Features,
    /// Weighted sum of the two networks' logits (MViTime++).
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Single {
        config: ModelConfig,
        input_norm: InputNorm,
    },
    Combined {
        mode: CombineMode,
        alpha: f64,
        self_config: ModelConfig,
        self_norm: InputNorm,
        cross_config: ModelConfig,
        cross_norm: InputNorm,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training stage that produced the weights ("pretrain", "finetune", ...).
    pub stage: String,
    pub step: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub config_digest: String,
    /// SHA-256 of the recorded loss curve.
    pub loss_digest: String,
    /// Every subject whose epochs influenced these weights, accumulated over
    /// all upstream stages.
    pub subjects_seen: BTreeSet<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn digest_losses(losses: &[f64]) -> String {
        let mut h = Sha256::new();
        for l in losses {
            h.update(l.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn single(model: &Mvitime<f32>, meta: CheckpointMeta) -> Self {
        Self {
            architecture: Architecture::Single {
                config: model.config().clone(),
                input_norm: model.input_norm,
            },
            meta,
            tensors: named(model, ""),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuild a single network; `prefix` selects a branch of a combined checkpoint.
    pub fn network(&self, config: &ModelConfig, norm: InputNorm, prefix: &str) -> Result<Mvitime<f32>, ModelError> {
        let specs = super::layout(config)?;
        let params = specs
            .iter()
            .map(|s| {
                let name = format!("{prefix}{}", s.name);
                self.tensor(&name).cloned().ok_or(ModelError::BadParameter {
                    name,
                    reason: "absent from checkpoint".into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Mvitime::from_params(config.clone(), params, norm)
    }

    /// The network of a single-architecture checkpoint.
    pub fn model(&self) -> Result<Mvitime<f32>, ModelError> {
        match &self.architecture {
            Architecture::Single { config, input_norm } => self.network(config, *input_norm, ""),
            Architecture::Combined { .. } => Err(ModelError::Format(
                "expected a single network, found a combined one".into(),
            )),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = Header {
            architecture: self.architecture.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
        let n: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let fmt = |m: &str| ModelError::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fmt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(fmt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| ModelError::Format(e.to_string()))?;
        let mut data = body[hlen..].chunks_exact(4);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let vals: Vec<f32> = data
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if vals.len() != n {
                return Err(fmt(&format!("truncated tensor {name}")));
            }
            tensors.push((name, Tensor::new(shape, vals)?));
        }
        if data.next().is_some() || !data.remainder().is_empty() {
            return Err(fmt("trailing bytes after last tensor"));
        }
        Ok(Self {
            architecture: header.architecture,
            meta: header.meta,
            tensors,
        })
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Parameters of `model` named with `prefix`.
pub fn named(model: &Mvitime<f32>, prefix: &str) -> Vec<(String, Tensor<f32>)> {
    model
        .specs()
        .iter()
        .zip(model.params())
        .map(|(s, p)| (format!("{prefix}{}", s.name), p.clone()))
        .collect()
}
