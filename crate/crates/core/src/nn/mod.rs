//! Backbones, the shared classifier and the assembled [`ModelGraph`].

pub mod gradcheck;
pub mod layers;
pub mod recurrent;
pub mod speech;
pub mod text;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TensorError, Var};
use crate::params::{Mode, ParamStore, Session};
use crate::pooling::{ConcatFusion, FusionKind, ModalAttention, Pooler, PoolingKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use layers::{BatchNorm, Linear};

const STATISTICS_MIN_STEPS: usize = 2;
use speech::{Crnn, FeatureInput, SincNet, SpeechEncoder, WaveInput, XVector};
use text::{TextEncoder, TextInput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{kind} needs the {modality} input, which the batch does not provide")]
    MissingModality { kind: ModelKind, modality: &'static str },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bilstm,
    Textcnn,
    Transformer,
    Crnn,
    Xvector,
    Sincnet,
    Mmsrinet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Bilstm,
        ModelKind::Textcnn,
        ModelKind::Transformer,
        ModelKind::Crnn,
        ModelKind::Xvector,
        ModelKind::Sincnet,
        ModelKind::Mmsrinet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bilstm => "bilstm",
            ModelKind::Textcnn => "textcnn",
            ModelKind::Transformer => "transformer",
            ModelKind::Crnn => "crnn",
            ModelKind::Xvector => "xvector",
            ModelKind::Sincnet => "sincnet",
            ModelKind::Mmsrinet => "mmsrinet",
        }
    }

    pub fn uses_text(self) -> bool {
        matches!(self, ModelKind::Bilstm | ModelKind::Textcnn | ModelKind::Transformer | ModelKind::Mmsrinet)
    }

    /// Filterbank features (as opposed to raw samples).
    pub fn uses_features(self) -> bool {
        matches!(self, ModelKind::Crnn | ModelKind::Xvector | ModelKind::Mmsrinet)
    }

    pub fn uses_waveform(self) -> bool {
        self == ModelKind::Sincnet
    }

    pub fn uses_audio(self) -> bool {
        self.uses_features() || self.uses_waveform()
    }

    pub fn default_pooling(self) -> PoolingKind {
        match self {
            ModelKind::Xvector | ModelKind::Sincnet => PoolingKind::Statistics,
            _ => PoolingKind::SelfAttention,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown model `{s}` (bilstm|textcnn|transformer|crnn|xvector|sincnet|mmsrinet)"))
    }
}

/// Every architectural size. [`ModelConfig::paper`] holds the published
/// widths; [`ModelConfig::tiny`] shrinks them for numeric checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Word-embedding width and the shared encoder/fusion output width.
    pub embed_dim: usize,
    /// Units per direction.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub cnn_kernels: Vec<usize>,
    pub cnn_filters: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_ff: usize,
    pub causal_mask: bool,
    pub feature_dim: usize,
    pub crnn_channels: Vec<usize>,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub tdnn_channels: usize,
    pub sinc_filters: usize,
    pub sinc_kernel: usize,
    pub sinc_stride: usize,
    pub sample_rate: f64,
    pub classifier_hidden: usize,
    /// `None` selects the kind's default.
    pub pooling: Option<PoolingKind>,
    pub fusion: FusionKind,
}

impl ModelConfig {
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 512,
            lstm_hidden: 512,
            lstm_layers: 2,
            cnn_kernels: vec![3, 4, 5],
            cnn_filters: 256,
            transformer_layers: 4,
            transformer_heads: 4,
            transformer_ff: 512,
            causal_mask: false,
            feature_dim: crate::audio::FILTERBANK_CHANNELS,
            crnn_channels: vec![32, 64, 128, 128, 128],
            gru_hidden: 256,
            gru_layers: 2,
            tdnn_channels: 512,
            sinc_filters: 80,
            sinc_kernel: 251,
            sinc_stride: 80,
            sample_rate: 8000.0,
            classifier_hidden: 256,
            pooling: None,
            fusion: FusionKind::ModalAttention,
        }
    }

    /// Published topology at desk-scale widths, sized for single-core
    /// training on synthetic corpora.
    pub fn compact(vocab_size: usize) -> Self {
        Self {
            embed_dim: 64,
            lstm_hidden: 64,
            cnn_filters: 32,
            transformer_layers: 2,
            transformer_ff: 128,
            crnn_channels: vec![8, 16, 16, 16, 16],
            gru_hidden: 32,
            tdnn_channels: 64,
            sinc_filters: 32,
            sinc_kernel: 129,
            classifier_hidden: 32,
            ..Self::paper(vocab_size)
        }
    }

    /// Same topology with small widths.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 8,
            lstm_hidden: 4,
            lstm_layers: 2,
            cnn_kernels: vec![3, 4, 5],
            cnn_filters: 3,
            transformer_layers: 2,
            transformer_heads: 2,
            transformer_ff: 8,
            causal_mask: false,
            feature_dim: 32,
            crnn_channels: vec![2, 2, 3, 3, 3],
            gru_hidden: 4,
            gru_layers: 2,
            tdnn_channels: 4,
            sinc_filters: 4,
            sinc_kernel: 31,
            sinc_stride: 10,
            sample_rate: 8000.0,
            classifier_hidden: 6,
            pooling: None,
            fusion: FusionKind::ModalAttention,
        }
    }

    pub fn pooling_for(&self, kind: ModelKind) -> PoolingKind {
        self.pooling.unwrap_or_else(|| kind.default_pooling())
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size < 3 {
            return bad("vocabulary needs at least one token beyond PAD and UNK");
        }
        if self.embed_dim == 0 || self.transformer_heads == 0 || !self.embed_dim.is_multiple_of(self.transformer_heads) {
            return bad("embedding width must be a positive multiple of the head count");
        }
        if self.cnn_kernels.is_empty() || self.cnn_kernels.contains(&0) {
            return bad("text CNN needs positive kernel heights");
        }
        if self.feature_dim >> self.crnn_channels.len() == 0 {
            return bad("feature width does not survive the CRNN pooling stages");
        }
        if self.sinc_kernel.is_multiple_of(2) || self.sinc_stride == 0 {
            return bad("sinc kernel must be odd and the stride positive");
        }
        Ok(())
    }
}

/// Two hidden FC layers (BN before ReLU) and a softmax output layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub out: Linear,
}

impl Classifier {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl rand::Rng, inputs: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, "classifier.fc1", inputs, hidden, true),
            bn1: BatchNorm::new(store, "classifier.bn1", hidden),
            fc2: Linear::new(store, rng, "classifier.fc2", hidden, hidden, true),
            bn2: BatchNorm::new(store, "classifier.bn2", hidden),
            out: Linear::new(store, rng, "classifier.out", hidden, 2, true),
        }
    }

    /// `(B, inputs)` embedding → `(B, 2)` probabilities `[atco, pilot]`.
    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, z: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let h = self.bn1.forward(s, self.fc1.forward(s, z)?)?.relu();
        let h = self.bn2.forward(s, self.fc2.forward(s, h)?)?.relu();
        self.out.forward(s, h)?.softmax(1)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Modal { attention: ModalAttention, pool: Pooler },
    Concat { speech_pool: Pooler, text_pool: Pooler, fuse: ConcatFusion },
}

#[derive(Clone, Debug)]
pub enum Network {
    Text { encoder: TextEncoder, pool: Pooler },
    Speech { encoder: SpeechEncoder, pool: Pooler },
    Multi { speech: Crnn, text: TextEncoder, fusion: Fusion },
}

/// Model inputs; which fields are required depends on the model kind.
#[derive(Clone, Debug, Default)]
pub struct Batch<T> {
    pub text: Option<TextInput>,
    pub features: Option<FeatureInput<T>>,
    pub waves: Option<WaveInput<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.text
            .as_ref()
            .map(|t| t.batch)
            .or_else(|| self.features.as_ref().map(|f| f.lengths.len()))
            .or_else(|| self.waves.as_ref().map(|w| w.lengths.len()))
            .unwrap_or(0)
    }
}

/// Hidden sequence right before the final pooling stage.
pub struct HiddenMap<'t, T: Scalar> {
    pub values: Var<'t, T>,
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ModelGraph<T> {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub network: Network,
    pub head: Classifier,
}

impl<T: Scalar> ModelGraph<T> {
    /// Deterministic construction: identical `(kind, config, seed)` gives
    /// identical parameters.
    pub fn new(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let pooling = config.pooling_for(kind);
        let network = match kind {
            ModelKind::Bilstm | ModelKind::Textcnn | ModelKind::Transformer => Network::Text {
                encoder: TextEncoder::new(&mut store, &mut rng, kind, &config),
                pool: Pooler::new(&mut store, &mut rng, "pool", pooling, d),
            },
            ModelKind::Crnn | ModelKind::Xvector | ModelKind::Sincnet => {
                let (encoder, width) = match kind {
                    ModelKind::Crnn => (SpeechEncoder::Crnn(Crnn::new(&mut store, &mut rng, "speech.crnn", &config)), d),
                    ModelKind::Xvector => (
                        SpeechEncoder::XVector(XVector::new(&mut store, &mut rng, "speech.xvector", &config)),
                        config.tdnn_channels,
                    ),
                    _ => (
                        SpeechEncoder::SincNet(SincNet::new(&mut store, &mut rng, "speech.sincnet", &config)),
                        config.tdnn_channels,
                    ),
                };
                if width != d && pooling != PoolingKind::Statistics {
                    return Err(ModelError::Config(format!(
                        "{kind} with {pooling} pooling needs tdnn_channels == embed_dim"
                    )));
                }
                let pool = Pooler::new(&mut store, &mut rng, "pool", pooling, width);
                Network::Speech { encoder, pool }
            }
            ModelKind::Mmsrinet => {
                let speech = Crnn::new(&mut store, &mut rng, "speech.crnn", &config);
                let text = TextEncoder::new(&mut store, &mut rng, ModelKind::Bilstm, &config);
                let fusion = match config.fusion {
                    FusionKind::ModalAttention => Fusion::Modal {
                        attention: ModalAttention::new(&mut store, &mut rng, "fusion.modal", d, d, d),
                        pool: Pooler::new(&mut store, &mut rng, "pool", pooling, d),
                    },
                    FusionKind::Concat => Fusion::Concat {
                        speech_pool: Pooler::new(&mut store, &mut rng, "pool.speech", pooling, d),
                        text_pool: Pooler::new(&mut store, &mut rng, "pool.text", pooling, d),
                        fuse: ConcatFusion::new(&mut store, &mut rng, "fusion.concat", d, d, d),
                    },
                };
                Network::Multi { speech, text, fusion }
            }
        };
        let embed_out = match &network {
            Network::Speech {
                encoder: SpeechEncoder::XVector(_) | SpeechEncoder::SincNet(_),
                ..
            } => config.tdnn_channels,
            _ => d,
        };
        let head = Classifier::new(&mut store, &mut rng, embed_out, config.classifier_hidden);
        Ok(Self {
            kind,
            config,
            store,
            network,
            head,
        })
    }

    pub fn pooling(&self) -> PoolingKind {
        self.config.pooling_for(self.kind)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same model with parameters and buffers converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            kind: self.kind,
            config: self.config.clone(),
            store: self.store.cast(),
            network: self.network.clone(),
            head: self.head.clone(),
        }
    }

    fn text<'b>(&self, batch: &'b Batch<T>) -> Result<&'b TextInput, ModelError> {
        batch.text.as_ref().ok_or(ModelError::MissingModality {
            kind: self.kind,
            modality: "text",
        })
    }

    fn features<'b>(&self, batch: &'b Batch<T>) -> Result<&'b FeatureInput<T>, ModelError> {
        batch.features.as_ref().ok_or(ModelError::MissingModality {
            kind: self.kind,
            modality: "audio",
        })
    }

    fn waves<'b>(&self, batch: &'b Batch<T>) -> Result<&'b WaveInput<T>, ModelError> {
        batch.waves.as_ref().ok_or(ModelError::MissingModality {
            kind: self.kind,
            modality: "audio",
        })
    }

    /// The sequence the final pooling stage consumes (for the concat
    /// ablation, the speech branch).
    pub fn hidden_map<'t>(&self, s: &Session<'t, '_, T>, batch: &Batch<T>) -> Result<HiddenMap<'t, T>, ModelError> {
        match &self.network {
            Network::Text { encoder, .. } => {
                let input = self.text(batch)?;
                Ok(HiddenMap {
                    values: encoder.forward(s, input)?,
                    lengths: input.lengths.clone(),
                })
            }
            Network::Speech { encoder, .. } => {
                let (values, lengths) = match encoder {
                    SpeechEncoder::Crnn(c) => c.forward(s, self.features(batch)?)?,
                    SpeechEncoder::XVector(x) => x.forward(s, self.features(batch)?)?,
                    SpeechEncoder::SincNet(n) => n.forward(s, self.waves(batch)?)?,
                };
                Ok(HiddenMap { values, lengths })
            }
            Network::Multi { speech, text, fusion } => {
                let input = self.text(batch)?;
                let (hs, lengths) = speech.forward(s, self.features(batch)?)?;
                let values = match fusion {
                    Fusion::Modal { attention, .. } => {
                        let ht = text.forward(s, input)?;
                        attention.forward(s, hs, ht, &input.lengths)?
                    }
                    Fusion::Concat { .. } => hs,
                };
                Ok(HiddenMap { values, lengths })
            }
        }
    }

    /// Pooled `(B, D)` embedding fed to the classifier.
    pub fn embed<'t>(&self, s: &Session<'t, '_, T>, batch: &Batch<T>) -> Result<Var<'t, T>, ModelError> {
        match &self.network {
            Network::Text { pool, .. } | Network::Speech { pool, .. } => {
                let h = self.hidden_map(s, batch)?;
                Ok(pool.forward(s, h.values, &h.lengths)?)
            }
            Network::Multi { speech, text, fusion } => match fusion {
                Fusion::Modal { pool, .. } => {
                    let h = self.hidden_map(s, batch)?;
                    Ok(pool.forward(s, h.values, &h.lengths)?)
                }
                Fusion::Concat {
                    speech_pool,
                    text_pool,
                    fuse,
                } => {
                    let input = self.text(batch)?;
                    let (hs, ls) = speech.forward(s, self.features(batch)?)?;
                    let ht = text.forward(s, input)?;
                    let ps = speech_pool.forward(s, hs, &ls)?;
                    let pt = text_pool.forward(s, ht, &input.lengths)?;
                    Ok(fuse.forward(s, ps, pt)?)
                }
            },
        }
    }

    /// Fewest feature frames every speech path accepts, leaving statistics
    /// pooling at least two steps.
    pub fn min_frames(&self) -> usize {
        match &self.network {
            Network::Speech {
                encoder: SpeechEncoder::XVector(x),
                ..
            } => x.tdnn.shrink() + STATISTICS_MIN_STEPS,
            Network::Speech {
                encoder: SpeechEncoder::Crnn(c),
                ..
            }
            | Network::Multi { speech: c, .. } => c.min_frames() * self.pooled_steps(),
            _ => 1,
        }
    }

    /// Fewest tokens per transcript.
    pub fn min_tokens(&self) -> usize {
        match &self.network {
            Network::Text { .. }
            | Network::Multi {
                fusion: Fusion::Concat { .. },
                ..
            } => self.pooled_steps(),
            _ => 1,
        }
    }

    fn pooled_steps(&self) -> usize {
        if self.pooling() == PoolingKind::Statistics {
            STATISTICS_MIN_STEPS
        } else {
            1
        }
    }

    /// Fewest raw samples the waveform path accepts.
    pub fn min_samples(&self) -> usize {
        match &self.network {
            Network::Speech {
                encoder: SpeechEncoder::SincNet(n),
                ..
            } => n.spec.kernel_len + (n.tdnn.shrink() + STATISTICS_MIN_STEPS - 1) * n.stride,
            _ => 1,
        }
    }

    /// `(B, 2)` class probabilities, column 1 = pilot.
    pub fn forward<'t>(&self, s: &Session<'t, '_, T>, batch: &Batch<T>) -> Result<Var<'t, T>, ModelError> {
        let z = self.embed(s, batch)?;
        Ok(self.head.forward(s, z)?)
    }

    /// Evaluation-mode probabilities without gradient tracking.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Tensor<T>, ModelError> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store, Mode::Eval, false);
        Ok(self.forward(&s, batch)?.value())
    }

    /// Writes queued running-statistic updates back into the store.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(crate::params::BufferId, Tensor<T>)>) {
        for (id, t) in updates {
            self.store.set_buffer(id, t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("bert".parse::<ModelKind>().is_err());
    }

    #[test]
    fn parameter_count_is_a_function_of_kind_and_config() {
        for k in ModelKind::ALL {
            let a = ModelGraph::<f32>::new(k, ModelConfig::tiny(10), 1).unwrap();
            let b = ModelGraph::<f32>::new(k, ModelConfig::tiny(10), 2).unwrap();
            assert_eq!(a.num_parameters(), b.num_parameters(), "{k}");
        }
    }

    #[test]
    fn transformer_head_dim() {
        let c = ModelConfig::paper(100);
        assert_eq!(c.embed_dim / c.transformer_heads, 128);
        assert_eq!(c.cnn_kernels, vec![3, 4, 5]);
    }
}
