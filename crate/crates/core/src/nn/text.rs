//! Text backbones over embedded token sequences.

use rand::Rng;

use super::layers::{additive_mask, length_mask, Embedding, LayerNorm, Linear};
use super::recurrent::BiLstm;
use super::ModelConfig;
use crate::autodiff::{Conv2dGeometry, Pool2dGeometry, TensorError, Var};
use crate::params::{init, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Padded token ids, row-major `(batch, len)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInput {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl TextInput {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize, lengths: Vec<usize>) -> Result<Self, TensorError> {
        if ids.len() != batch * len || lengths.len() != batch || batch == 0 || len == 0 {
            return Err(crate::autodiff::invalid("text_input", "ids, batch and lengths disagree"));
        }
        if lengths.iter().any(|&l| l == 0 || l > len) {
            return Err(crate::autodiff::invalid("text_input", "lengths must lie in 1..=len"));
        }
        Ok(Self { ids, batch, len, lengths })
    }
}

/// One convolution branch of the text CNN.
#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub kernel: usize,
    pub w: ParamId,
    pub b: ParamId,
}

/// Parallel `(k × E)` convolutions over the embedded sequence, each
/// followed by ReLU and a stride-1 `(3 × 1)` max-pool; branch outputs are
/// concatenated per time step.
#[derive(Clone, Debug)]
pub struct TextCnn {
    pub branches: Vec<CnnBranch>,
    pub filters: usize,
}

impl TextCnn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, embed: usize, kernels: &[usize], filters: usize) -> Self {
        let branches = kernels
            .iter()
            .map(|&k| CnnBranch {
                kernel: k,
                w: store.add(
                    format!("{name}.k{k}.weight"),
                    init::glorot_uniform(rng, &[filters, 1, k, embed], k * embed, filters * k * embed),
                ),
                b: store.add(format!("{name}.k{k}.bias"), Tensor::zeros(&[filters, 1, 1])),
            })
            .collect();
        Self { branches, filters }
    }

    pub fn output_dim(&self) -> usize {
        self.filters * self.branches.len()
    }

    /// `(B, T, E)` → `(B, T, filters · branches)`.
    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, x: Var<'t, T>, lengths: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        let (b, t, e) = (shape[0], shape[1], shape[2]);
        let image = x.reshape(&[b, 1, t, e])?;
        let mask = length_mask::<T>(lengths, t).reshape(&[b, 1, t, 1])?;
        let pool = Pool2dGeometry {
            kernel: [3, 1],
            stride: [1, 1],
            pad: [1, 0],
        };
        let mut maps = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let top = (br.kernel - 1) / 2;
            let geom = Conv2dGeometry {
                pad: [top, br.kernel - 1 - top, 0, 0],
            };
            let y = image
                .conv2d(s.param(br.w), geom)?
                .add(s.param(br.b))?
                .relu()
                .mul_const(mask.clone())?
                .max_pool2d(pool)?;
            maps.push(y);
        }
        Var::concat(&maps, 1)?
            .reshape(&[b, self.output_dim(), t])?
            .transpose(1, 2)
    }
}

/// Post-norm encoder block: `x ← LN(x + MHA(x))`, `x ← LN(x + FF(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, true),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, true),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim, true),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, ff, true),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ff, dim, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            heads,
        }
    }

    /// `bias` is the additive attention mask, broadcastable to
    /// `(B·heads, T, T)`.
    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, x: Var<'t, T>, bias: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let split = |v: Var<'t, T>| -> Result<Var<'t, T>, TensorError> {
            v.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, t, dh])
        };
        let q = split(self.query.forward(s, x)?)?;
        let k = split(self.key.forward(s, x)?)?;
        let v = split(self.value.forward(s, x)?)?;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let attn = q
            .bmm(k.transpose(1, 2)?)?
            .scale(scale)
            .add_const(bias.clone())?
            .softmax(2)?;
        let ctx = attn
            .bmm(v)?
            .reshape(&[b, h, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        let x = self.norm1.forward(s, x.add(self.output.forward(s, ctx)?)?)?;
        let ff = self.ff2.forward(s, self.ff1.forward(s, x)?.relu())?;
        self.norm2.forward(s, x.add(ff)?)
    }
}

/// Sinusoidal position table `(len, dim)`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data[pos * dim + i] = T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, dim], data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<EncoderBlock>,
    pub heads: usize,
    pub causal: bool,
}

impl Transformer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        let blocks = (0..cfg.transformer_layers)
            .map(|l| EncoderBlock::new(store, rng, &format!("{name}.block{l}"), cfg.embed_dim, cfg.transformer_heads, cfg.transformer_ff))
            .collect();
        Self {
            blocks,
            heads: cfg.transformer_heads,
            causal: cfg.causal_mask,
        }
    }

    /// Attention bias combining the key padding mask and, when enabled,
    /// the causal mask.
    fn attention_bias<T: Scalar>(&self, lengths: &[usize], t: usize) -> Tensor<T> {
        let (b, h) = (lengths.len(), self.heads);
        let pad = additive_mask::<T>(lengths, t);
        let neg = T::from_f64_lossy(super::layers::MASK_LOGIT);
        let mut data = Vec::with_capacity(b * h * t * t);
        for bi in 0..b {
            for _ in 0..h {
                for i in 0..t {
                    for j in 0..t {
                        let mut v = pad.data()[bi * t + j];
                        if self.causal && j > i {
                            v = neg;
                        }
                        data.push(v);
                    }
                }
            }
        }
        Tensor::new(&[b * h, t, t], data).expect("shape")
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, x: Var<'t, T>, lengths: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        let (t, d) = (shape[1], shape[2]);
        let bias = self.attention_bias(lengths, t);
        let mut x = x.add_const(positional_encoding(t, d))?;
        for block in &self.blocks {
            x = block.forward(s, x, &bias)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum TextBackbone {
    Bilstm(BiLstm),
    Textcnn(TextCnn),
    Transformer(Transformer),
}

/// Embedding, backbone and the projection to the shared embedding width.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Embedding,
    pub backbone: TextBackbone,
    pub projection: Linear,
}

impl TextEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, kind: super::ModelKind, cfg: &ModelConfig) -> Self {
        let e = cfg.embed_dim;
        let embedding = Embedding::new(store, rng, "text.embedding", cfg.vocab_size, e, crate::text::PAD);
        let (backbone, width) = match kind {
            super::ModelKind::Textcnn => {
                let cnn = TextCnn::new(store, rng, "text.cnn", e, &cfg.cnn_kernels, cfg.cnn_filters);
                let w = cnn.output_dim();
                (TextBackbone::Textcnn(cnn), w)
            }
            super::ModelKind::Transformer => (TextBackbone::Transformer(Transformer::new(store, rng, "text.transformer", cfg)), e),
            _ => {
                let lstm = BiLstm::new(store, rng, "text.bilstm", e, cfg.lstm_hidden, cfg.lstm_layers);
                let w = lstm.output_dim();
                (TextBackbone::Bilstm(lstm), w)
            }
        };
        let projection = Linear::new(store, rng, "text.projection", width, cfg.embed_dim, true);
        Self {
            embedding,
            backbone,
            projection,
        }
    }

    /// Backbone hidden map before the projection, `(B, T, width)`.
    pub fn backbone_map<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, input: &TextInput) -> Result<Var<'t, T>, TensorError> {
        let x = self.embedding.forward(s, &input.ids, input.batch, input.len)?;
        match &self.backbone {
            TextBackbone::Bilstm(l) => l.forward(s, x, &length_mask(&input.lengths, input.len)),
            TextBackbone::Textcnn(c) => c.forward(s, x, &input.lengths),
            TextBackbone::Transformer(tr) => tr.forward(s, x, &input.lengths),
        }
    }

    /// Projected hidden map `(B, T, embed_dim)`.
    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, input: &TextInput) -> Result<Var<'t, T>, TensorError> {
        let h = self.backbone_map(s, input)?;
        self.projection.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_values() {
        let pe: Tensor<f64> = positional_encoding(3, 4);
        assert_eq!(pe.get(&[0, 0]), 0.0);
        assert_eq!(pe.get(&[0, 1]), 1.0);
        assert!((pe.get(&[2, 0]) - 2f64.sin()).abs() < 1e-15);
        assert!((pe.get(&[2, 3]) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
