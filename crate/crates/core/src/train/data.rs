//! Manifests to padded model batches.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_wav, normalize_waveform, AudioError, FeatureExtractor, FeatureMatrix};
use crate::nn::speech::{FeatureInput, WaveInput};
use crate::nn::text::TextInput;
use crate::nn::{Batch, ModelGraph, ModelKind};
use crate::scalar::Scalar;
use crate::synth::ManifestEntry;
use crate::tensor::Tensor;
use crate::text::{tokenize, TextError, Vocabulary, DEFAULT_MAX_LEN, PAD};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    BadLine { path: String, line: usize, reason: String },
    #[error("{path}:{line}: missing field `{field}` required by model `{kind}`")]
    MissingField {
        path: String,
        line: usize,
        field: &'static str,
        kind: ModelKind,
    },
    #[error("{path}: manifest has no utterances")]
    Empty { path: String },
    #[error("{path}:{line}: {source}")]
    Audio {
        path: String,
        line: usize,
        #[source]
        source: AudioError,
    },
    #[error("{path}:{line}: {source}")]
    Text {
        path: String,
        line: usize,
        #[source]
        source: TextError,
    },
}

/// A parsed manifest with its location; audio paths resolve against `dir`.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| DataError::BadLine {
                path: p.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(DataError::Empty { path: p });
        }
        Ok(Self {
            path: path.to_path_buf(),
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    /// Every entry carries the fields `kind` consumes.
    pub fn check_modalities(&self, kind: ModelKind) -> Result<(), DataError> {
        for (i, e) in self.entries.iter().enumerate() {
            let missing = if kind.uses_text() && e.text.is_none() {
                Some("text")
            } else if kind.uses_audio() && e.audio.is_none() {
                Some("audio")
            } else {
                None
            };
            if let Some(field) = missing {
                return Err(DataError::MissingField {
                    path: self.path.display().to_string(),
                    line: i + 1,
                    field,
                    kind,
                });
            }
        }
        Ok(())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter_map(|e| e.text.as_deref())
    }
}

/// Per-channel feature standardisation fitted on the training split.
/// Statistics are pooled over all frames, so stationary channel colouring
/// survives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureNorm {
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Option<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.channels];
                sq = vec![0.0; m.channels];
            }
            for row in m.values.chunks(m.channels) {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            n += m.frames;
        }
        if n == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Some(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, m: &mut FeatureMatrix) {
        for row in m.values.chunks_mut(m.channels) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// One utterance ready for batching.
#[derive(Clone, Debug)]
pub struct Example {
    pub text: Option<Vec<usize>>,
    pub features: Option<FeatureMatrix>,
    pub wave: Option<Vec<f32>>,
    pub label: usize,
}

/// Everything that turns raw utterances into model inputs. Fitted on the
/// training split and stored with checkpoints.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub kind: ModelKind,
    pub vocab: Option<Vocabulary>,
    pub norm: Option<FeatureNorm>,
    pub max_text_len: usize,
    /// Shorter feature matrices are extended by repeating the last frame.
    pub min_frames: usize,
    /// Shorter waveforms are zero-extended.
    pub min_samples: usize,
    /// Shorter transcripts repeat their last token.
    pub min_tokens: usize,
}

fn raw_features(ex: &FeatureExtractor, wave: &crate::audio::Waveform) -> Result<FeatureMatrix, AudioError> {
    let mut samples = wave.samples.clone();
    let need = ex.spec.window_length;
    if samples.len() < need {
        samples.resize(need, 0.0);
    }
    ex.log_filterbank(&crate::audio::Waveform::new(samples))
}

impl Frontend {
    /// Builds the vocabulary and feature statistics from `train`.
    pub fn fit(kind: ModelKind, train: &Manifest) -> Result<Self, DataError> {
        train.check_modalities(kind)?;
        let vocab = if kind.uses_text() {
            Some(Vocabulary::build(train.texts(), 1).map_err(|source| DataError::Text {
                path: train.path.display().to_string(),
                line: 1,
                source,
            })?)
        } else {
            None
        };
        let norm = if kind.uses_features() {
            let ex = FeatureExtractor::standard();
            let mut mats = Vec::with_capacity(train.entries.len());
            for (i, e) in train.entries.iter().enumerate() {
                let w = load_entry_audio(train, i, e)?;
                mats.push(raw_features(&ex, &w).map_err(|source| audio_err(train, i, source))?);
            }
            FeatureNorm::fit(&mats)
        } else {
            None
        };
        Ok(Self {
            kind,
            vocab,
            norm,
            max_text_len: DEFAULT_MAX_LEN,
            min_frames: 1,
            min_samples: 1,
            min_tokens: 1,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.as_ref().map_or(crate::text::RESERVED + 1, |v| v.len().max(crate::text::RESERVED + 1))
    }

    /// Adopts the model's minimum input sizes.
    pub fn fit_model<T: Scalar>(&mut self, model: &ModelGraph<T>) {
        self.min_frames = model.min_frames();
        self.min_samples = model.min_samples();
        self.min_tokens = model.min_tokens();
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>, TextError> {
        let vocab = self.vocab.as_ref().expect("text model has a vocabulary");
        tokenize(text)?;
        let mut ids = vocab.encode(text)?;
        ids.truncate(self.max_text_len.max(self.min_tokens));
        while ids.len() < self.min_tokens {
            ids.push(*ids.last().expect("tokenize rejects empty transcripts"));
        }
        Ok(ids)
    }

    pub fn features(&self, ex: &FeatureExtractor, wave: &crate::audio::Waveform) -> Result<FeatureMatrix, AudioError> {
        let mut m = raw_features(ex, wave)?;
        if let Some(norm) = &self.norm {
            norm.apply(&mut m);
        }
        if m.frames < self.min_frames {
            let last = m.values[(m.frames - 1) * m.channels..].to_vec();
            for _ in m.frames..self.min_frames {
                m.values.extend_from_slice(&last);
            }
            m.frames = self.min_frames;
        }
        Ok(m)
    }

    pub fn wave(&self, wave: &crate::audio::Waveform) -> Vec<f32> {
        let mut s = normalize_waveform(wave).samples;
        if s.len() < self.min_samples {
            s.resize(self.min_samples, 0.0);
        }
        s
    }

    /// A single utterance from raw inputs.
    pub fn example(&self, text: Option<&str>, wave: Option<&crate::audio::Waveform>, label: usize) -> Result<Example, DataError> {
        let ex = FeatureExtractor::standard();
        let at = |source| DataError::Audio {
            path: "<input>".into(),
            line: 1,
            source,
        };
        Ok(Example {
            text: match (self.kind.uses_text(), text) {
                (true, Some(t)) => Some(self.encode_text(t).map_err(|source| DataError::Text {
                    path: "<input>".into(),
                    line: 1,
                    source,
                })?),
                _ => None,
            },
            features: match (self.kind.uses_features(), wave) {
                (true, Some(w)) => Some(self.features(&ex, w).map_err(at)?),
                _ => None,
            },
            wave: match (self.kind.uses_waveform(), wave) {
                (true, Some(w)) => Some(self.wave(w)),
                _ => None,
            },
            label,
        })
    }

    /// Loads and encodes every utterance of a manifest.
    pub fn dataset(&self, manifest: &Manifest) -> Result<Dataset, DataError> {
        manifest.check_modalities(self.kind)?;
        let ex = FeatureExtractor::standard();
        let mut examples = Vec::with_capacity(manifest.entries.len());
        for (i, e) in manifest.entries.iter().enumerate() {
            let wave = if self.kind.uses_audio() {
                Some(load_entry_audio(manifest, i, e)?)
            } else {
                None
            };
            let text = match (&e.text, self.kind.uses_text()) {
                (Some(t), true) => Some(self.encode_text(t).map_err(|source| DataError::Text {
                    path: manifest.path.display().to_string(),
                    line: i + 1,
                    source,
                })?),
                _ => None,
            };
            let features = match (&wave, self.kind.uses_features()) {
                (Some(w), true) => Some(self.features(&ex, w).map_err(|source| audio_err(manifest, i, source))?),
                _ => None,
            };
            let wave = match (&wave, self.kind.uses_waveform()) {
                (Some(w), true) => Some(self.wave(w)),
                _ => None,
            };
            examples.push(Example {
                text,
                features,
                wave,
                label: e.role.label(),
            });
        }
        Ok(Dataset { examples })
    }
}

fn audio_err(m: &Manifest, i: usize, source: AudioError) -> DataError {
    DataError::Audio {
        path: m.path.display().to_string(),
        line: i + 1,
        source,
    }
}

fn load_entry_audio(m: &Manifest, i: usize, e: &ManifestEntry) -> Result<crate::audio::Waveform, DataError> {
    let rel = e.audio.as_deref().expect("checked by check_modalities");
    load_wav(&m.dir.join(rel)).map_err(|source| audio_err(m, i, source))
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Padded batch of the given examples and their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Batch<T>, Vec<usize>) {
        let picked: Vec<&Example> = indices.iter().map(|&i| &self.examples[i]).collect();
        (make_batch(&picked), picked.iter().map(|e| e.label).collect())
    }
}

/// Right-pads every present modality to the longest example.
pub fn make_batch<T: Scalar>(examples: &[&Example]) -> Batch<T> {
    let b = examples.len();
    let text = examples.iter().all(|e| e.text.is_some()).then(|| {
        let rows: Vec<&Vec<usize>> = examples.iter().map(|e| e.text.as_ref().expect("checked")).collect();
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(1).max(1);
        let mut ids = Vec::with_capacity(b * len);
        for r in &rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, len - r.len()));
        }
        TextInput::new(ids, b, len, rows.iter().map(|r| r.len()).collect()).expect("consistent by construction")
    });
    let features = examples.iter().all(|e| e.features.is_some()).then(|| {
        let mats: Vec<&FeatureMatrix> = examples.iter().map(|e| e.features.as_ref().expect("checked")).collect();
        let t = mats.iter().map(|m| m.frames).max().unwrap_or(0);
        let c = mats.first().map_or(0, |m| m.channels);
        let mut values = vec![T::zero(); b * t * c];
        for (i, m) in mats.iter().enumerate() {
            for (dst, &v) in values[i * t * c..].iter_mut().zip(&m.values) {
                *dst = T::from_f64_lossy(v as f64);
            }
        }
        FeatureInput {
            values: Tensor::new(&[b, t, c], values).expect("shape"),
            lengths: mats.iter().map(|m| m.frames).collect(),
        }
    });
    let waves = examples.iter().all(|e| e.wave.is_some()).then(|| {
        let rows: Vec<&Vec<f32>> = examples.iter().map(|e| e.wave.as_ref().expect("checked")).collect();
        let l = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut samples = vec![T::zero(); b * l];
        for (i, r) in rows.iter().enumerate() {
            for (dst, &v) in samples[i * l..].iter_mut().zip(r.iter()) {
                *dst = T::from_f64_lossy(v as f64);
            }
        }
        WaveInput {
            samples: Tensor::new(&[b, l], samples).expect("shape"),
            lengths: rows.iter().map(|r| r.len()).collect(),
        }
    });
    Batch { text, features, waves }
}
