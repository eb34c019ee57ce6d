//! Binary checkpoint files.
//!
//! Layout, all integers little-endian: magic `SRICKPT1`, `u16` version,
//! `u32` tensor count, then per tensor a `u16`-prefixed UTF-8 name, `u8`
//! rank, `u64` dims and `f32` data in row-major order, and finally a
//! `u64`-prefixed UTF-8 JSON metadata block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sri_core::nn::{ModelConfig, ModelError, ModelGraph, ModelKind};
use sri_core::text::Vocabulary;
use sri_core::train::{FeatureNorm, Frontend, TrainConfig};
use sri_core::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SRICKPT1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (magic {found:?})")]
    BadMagic { path: String, found: Vec<u8> },
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { path: String, found: u16 },
    #[error("{path}: truncated checkpoint while reading {what}")]
    TruncatedCheckpoint { path: String, what: String },
    #[error("{path}: {reason}")]
    Payload { path: String, reason: String },
    #[error("{path}: bad metadata: {source}")]
    Metadata {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: checkpoint has no tensor `{name}`")]
    MissingTensor { path: String, name: String },
    #[error("{path}: tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        path: String,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Model {
        path: String,
        #[source]
        source: ModelError,
    },
}

/// Everything besides tensors needed to rebuild and feed the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub seed: u64,
    pub vocab_hash: Option<String>,
    pub vocab: Option<Vec<String>>,
    pub feature_norm: Option<FeatureNorm>,
    pub max_text_len: usize,
    pub train: Option<TrainConfig>,
}

impl Metadata {
    pub fn new(model: &ModelGraph<f32>, seed: u64, frontend: &Frontend, train: Option<TrainConfig>) -> Self {
        Self {
            kind: model.kind,
            config: model.config.clone(),
            seed,
            vocab_hash: frontend.vocab.as_ref().map(Vocabulary::hash),
            vocab: frontend.vocab.as_ref().map(|v| v.tokens().to_vec()),
            feature_norm: frontend.norm.clone(),
            max_text_len: frontend.max_text_len,
            train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: Metadata,
}

impl Checkpoint {
    /// Parameters then buffers, in store order.
    pub fn from_model(model: &ModelGraph<f32>, metadata: Metadata) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        tensors.extend(model.store.buffers().map(|(_, n, t)| (n.to_string(), t.clone())));
        Self { tensors, metadata }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0, path };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.into(),
                found: magic.to_vec(),
            });
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                path: path.into(),
                found: version,
            });
        }
        let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let what = format!("tensor {i}");
            let name_len = u16::from_le_bytes(r.array(&what)?) as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| r.payload(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let what = format!("tensor `{name}`");
            let rank = r.take(1, &what)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.array(&what)?);
                shape.push(usize::try_from(d).map_err(|_| r.payload(format!("{what} extent {d} too large")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| CheckpointError::TruncatedCheckpoint {
                    path: path.into(),
                    what: what.clone(),
                })?;
            let data = r
                .take(numel * 4, &what)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.payload(format!("{what}: {e}")))?;
            tensors.push((name, t));
        }
        let meta_len = u64::from_le_bytes(r.array("metadata length")?);
        let meta_len = usize::try_from(meta_len).map_err(|_| r.payload("metadata length overflows".into()))?;
        let meta = r.take(meta_len, "metadata")?;
        if r.remaining() != 0 {
            return Err(r.payload(format!(
                "{} bytes after the metadata block; tensor count {count} disagrees with the payload",
                r.remaining()
            )));
        }
        let metadata = serde_json::from_slice(meta).map_err(|source| CheckpointError::Metadata {
            path: path.into(),
            source,
        })?;
        Ok(Self { tensors, metadata })
    }

    /// Rebuilds the model from its metadata and overwrites every parameter
    /// and buffer with the stored values.
    pub fn to_model(&self, path: &str) -> Result<ModelGraph<f32>, CheckpointError> {
        let m = &self.metadata;
        let mut model = ModelGraph::<f32>::new(m.kind, m.config.clone(), m.seed).map_err(|source| CheckpointError::Model {
            path: path.into(),
            source,
        })?;
        let expected = model.store.len() + model.store.buffers().count();
        if expected != self.tensors.len() {
            return Err(CheckpointError::Payload {
                path: path.into(),
                reason: format!("{} tensors stored, model `{}` has {expected}", self.tensors.len(), m.kind),
            });
        }
        let lookup = |name: &str| {
            self.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CheckpointError::MissingTensor {
                    path: path.into(),
                    name: name.into(),
                })
        };
        let check = |name: &str, expected: &[usize], found: &Tensor<f32>| {
            if expected == found.shape() {
                Ok(())
            } else {
                Err(CheckpointError::ShapeMismatch {
                    path: path.into(),
                    name: name.into(),
                    expected: expected.to_vec(),
                    found: found.shape().to_vec(),
                })
            }
        };
        let params: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for (id, name, shape) in params {
            let t = lookup(&name)?;
            check(&name, &shape, t)?;
            *model.store.value_mut(id) = t.clone();
        }
        let buffers: Vec<_> = model.store.buffers().map(|(id, n, t)| (id, n.to_string(), t.shape().to_vec())).collect();
        for (id, name, shape) in buffers {
            let t = lookup(&name)?;
            check(&name, &shape, t)?;
            model.store.set_buffer(id, t.clone());
        }
        Ok(model)
    }

    /// The input pipeline the model was trained with.
    pub fn frontend(&self, model: &ModelGraph<f32>) -> Result<Frontend, CheckpointError> {
        let m = &self.metadata;
        let vocab = match &m.vocab {
            Some(tokens) => {
                let v = Vocabulary::from_tokens(tokens.clone()).map_err(|reason| CheckpointError::Payload {
                    path: String::new(),
                    reason,
                })?;
                if m.vocab_hash.as_deref() != Some(v.hash().as_str()) {
                    return Err(CheckpointError::Payload {
                        path: String::new(),
                        reason: "vocabulary does not match its recorded hash".into(),
                    });
                }
                Some(v)
            }
            None => None,
        };
        let mut f = Frontend {
            kind: m.kind,
            vocab,
            norm: m.feature_norm.clone(),
            max_text_len: m.max_text_len,
            min_frames: 1,
            min_samples: 1,
            min_tokens: 1,
        };
        f.fit_model(model);
        Ok(f)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::TruncatedCheckpoint {
                path: self.path.into(),
                what: what.into(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn payload(&self, reason: String) -> CheckpointError {
        CheckpointError::Payload {
            path: self.path.into(),
            reason,
        }
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: shown.clone(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes, &shown)
}

/// Loads a checkpoint and rebuilds its model and input pipeline.
pub fn load_model(path: &Path) -> Result<(ModelGraph<f32>, Frontend, Metadata), CheckpointError> {
    let ckpt = load(path)?;
    let shown = path.display().to_string();
    let model = ckpt.to_model(&shown)?;
    let frontend = ckpt.frontend(&model).map_err(|e| match e {
        CheckpointError::Payload { reason, .. } => CheckpointError::Payload { path: shown, reason },
        other => other,
    })?;
    Ok((model, frontend, ckpt.metadata))
}
