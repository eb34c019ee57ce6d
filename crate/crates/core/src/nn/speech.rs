//! Speech encoders: CRNN over filterbank features, the TDNN x-vector
//! stack, and the sinc-filter front end on raw samples.

use rand::Rng;

use super::layers::{length_mask, Linear};
use super::recurrent::Gru;
use super::ModelConfig;
use crate::autodiff::{Conv1dGeometry, Conv2dGeometry, Pool2dGeometry, SincSpec, TensorError, Var};
use crate::params::{init, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero-padded feature matrices `(batch, frames, channels)`.
#[derive(Clone, Debug)]
pub struct FeatureInput<T> {
    pub values: Tensor<T>,
    pub lengths: Vec<usize>,
}

/// Zero-padded, normalised waveforms `(batch, samples)`.
#[derive(Clone, Debug)]
pub struct WaveInput<T> {
    pub samples: Tensor<T>,
    pub lengths: Vec<usize>,
}

fn too_short(what: &str, need: usize, got: usize) -> TensorError {
    crate::autodiff::invalid("speech_encoder", format!("{what} of length {got} is shorter than the minimum {need}"))
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
}

/// Conv(3×3, pad 1) → ReLU → MaxPool(2×2) blocks over `(B, 1, T, F)`,
/// then stacked GRUs along time and a projection.
#[derive(Clone, Debug)]
pub struct Crnn {
    pub blocks: Vec<ConvBlock>,
    pub gru: Gru,
    pub projection: Linear,
    pub feature_dim: usize,
}

impl Crnn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        let mut cin = 1;
        let mut freq = cfg.feature_dim;
        let blocks = cfg
            .crnn_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let block = ConvBlock {
                    w: store.add(
                        format!("{name}.conv{i}.weight"),
                        init::glorot_uniform(rng, &[c, cin, 3, 3], cin * 9, c * 9),
                    ),
                    b: store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[c, 1, 1])),
                };
                cin = c;
                freq /= 2;
                block
            })
            .collect();
        let gru = Gru::new(store, rng, &format!("{name}.gru"), cin * freq, cfg.gru_hidden, cfg.gru_layers);
        let projection = Linear::new(store, rng, &format!("{name}.projection"), cfg.gru_hidden, cfg.embed_dim, true);
        Self {
            blocks,
            gru,
            projection,
            feature_dim: cfg.feature_dim,
        }
    }

    /// Shortest input (in frames) that survives every pooling stage.
    pub fn min_frames(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn output_lengths(&self, lengths: &[usize]) -> Vec<usize> {
        lengths.iter().map(|&l| l >> self.blocks.len()).collect()
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, input: &FeatureInput<T>) -> Result<(Var<'t, T>, Vec<usize>), TensorError> {
        let shape = input.values.shape();
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        if f != self.feature_dim {
            return Err(TensorError::ShapeMismatch {
                op: "crnn",
                left: shape.to_vec(),
                right: vec![self.feature_dim],
            });
        }
        if let Some(&l) = input.lengths.iter().find(|&&l| l < self.min_frames()) {
            return Err(too_short("feature matrix", self.min_frames(), l));
        }
        let mut x = s.tape.constant(input.values.reshape(&[b, 1, t, f])?);
        let mut lengths = input.lengths.clone();
        let same = Conv2dGeometry { pad: [1, 1, 1, 1] };
        for block in &self.blocks {
            x = x
                .conv2d(s.param(block.w), same)?
                .add(s.param(block.b))?
                .relu()
                .max_pool2d(Pool2dGeometry::tiles(2, 2))?;
            lengths.iter_mut().for_each(|l| *l /= 2);
            // zero the tail so the next convolution sees proper padding
            let tt = x.shape()[2];
            x = x.mul_const(length_mask::<T>(&lengths, tt).reshape(&[b, 1, tt, 1])?)?;
        }
        let xs = x.shape();
        let (c, tt, ff) = (xs[1], xs[2], xs[3]);
        let seq = x.permute(&[0, 2, 1, 3])?.reshape(&[b, tt, c * ff])?;
        let h = self.gru.forward(s, seq, &length_mask(&lengths, tt))?;
        Ok((self.projection.forward(s, h)?, lengths))
    }
}

#[derive(Clone, Debug)]
pub struct TdnnLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

/// Frame contexts {−2..2}, {−2,0,2}, {−3,0,3}, {0} as (kernel, dilation).
pub const TDNN_CONTEXTS: [(usize, usize); 4] = [(5, 1), (3, 2), (3, 3), (1, 1)];

/// Unpadded dilated 1-D convolutions with ReLU over `(B, C, T)`.
#[derive(Clone, Debug)]
pub struct Tdnn {
    pub layers: Vec<TdnnLayer>,
}

impl Tdnn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, inputs: usize, channels: usize) -> Self {
        let mut cin = inputs;
        let layers = TDNN_CONTEXTS
            .iter()
            .enumerate()
            .map(|(i, &(k, d))| {
                let layer = TdnnLayer {
                    w: store.add(
                        format!("{name}.tdnn{i}.weight"),
                        init::glorot_uniform(rng, &[channels, cin, k], cin * k, channels * k),
                    ),
                    b: store.add(format!("{name}.tdnn{i}.bias"), Tensor::zeros(&[channels, 1])),
                    kernel: k,
                    dilation: d,
                };
                cin = channels;
                layer
            })
            .collect();
        Self { layers }
    }

    /// Frames consumed by the full context: output length is `t − shrink`.
    pub fn shrink(&self) -> usize {
        self.layers.iter().map(|l| (l.kernel - 1) * l.dilation).sum()
    }

    /// `(B, C, T)` → `(B, T − shrink, channels)`.
    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        for layer in &self.layers {
            let geom = Conv1dGeometry {
                dilation: layer.dilation,
                ..Conv1dGeometry::default()
            };
            x = x.conv1d(s.param(layer.w), geom)?.add(s.param(layer.b))?.relu();
        }
        x.transpose(1, 2)
    }
}

/// x-vector frame stack over filterbank features.
#[derive(Clone, Debug)]
pub struct XVector {
    pub tdnn: Tdnn,
    pub feature_dim: usize,
}

impl XVector {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            tdnn: Tdnn::new(store, rng, name, cfg.feature_dim, cfg.tdnn_channels),
            feature_dim: cfg.feature_dim,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, input: &FeatureInput<T>) -> Result<(Var<'t, T>, Vec<usize>), TensorError> {
        let shape = input.values.shape();
        if shape[2] != self.feature_dim {
            return Err(TensorError::ShapeMismatch {
                op: "xvector",
                left: shape.to_vec(),
                right: vec![self.feature_dim],
            });
        }
        let shrink = self.tdnn.shrink();
        if let Some(&l) = input.lengths.iter().find(|&&l| l < shrink + 1) {
            return Err(too_short("feature matrix", shrink + 1, l));
        }
        let x = s.tape.constant(input.values.clone()).transpose(1, 2)?;
        let h = self.tdnn.forward(s, x)?;
        Ok((h, input.lengths.iter().map(|&l| l - shrink).collect()))
    }
}

/// Learnable band-pass filter bank applied to raw samples, followed by
/// rectification and the TDNN stack.
#[derive(Clone, Debug)]
pub struct SincNet {
    pub low: ParamId,
    pub band: ParamId,
    pub spec: SincSpec,
    pub stride: usize,
    pub tdnn: Tdnn,
}

impl SincNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        let spec = SincSpec::new(cfg.sinc_kernel, cfg.sample_rate);
        let (low, band) = sinc_init::<T>(cfg.sinc_filters, &spec);
        Self {
            low: store.add(format!("{name}.sinc.low_hz"), low),
            band: store.add(format!("{name}.sinc.band_hz"), band),
            spec,
            stride: cfg.sinc_stride,
            tdnn: Tdnn::new(store, rng, name, cfg.sinc_filters, cfg.tdnn_channels),
        }
    }

    pub fn frames(&self, samples: usize) -> usize {
        if samples < self.spec.kernel_len {
            0
        } else {
            (samples - self.spec.kernel_len) / self.stride + 1
        }
    }

    /// Filters as `(filters, 1, kernel)`.
    pub fn kernels<'t, T: Scalar>(&self, s: &Session<'t, '_, T>) -> Result<Var<'t, T>, TensorError> {
        let k = s.tape.sinc_kernel(s.param(self.low), s.param(self.band), self.spec)?;
        let f = k.shape()[0];
        k.reshape(&[f, 1, self.spec.kernel_len])
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, input: &WaveInput<T>) -> Result<(Var<'t, T>, Vec<usize>), TensorError> {
        let shape = input.samples.shape();
        let (b, l) = (shape[0], shape[1]);
        let shrink = self.tdnn.shrink();
        let frames: Vec<usize> = input.lengths.iter().map(|&n| self.frames(n)).collect();
        if let Some((i, _)) = frames.iter().enumerate().find(|(_, &f)| f < shrink + 1) {
            let need = self.spec.kernel_len + shrink * self.stride;
            return Err(too_short("waveform", need, input.lengths[i]));
        }
        let geom = Conv1dGeometry {
            stride: self.stride,
            ..Conv1dGeometry::default()
        };
        let x = s.tape.constant(input.samples.reshape(&[b, 1, l])?);
        let bands = x.conv1d(self.kernels(s)?, geom)?.abs();
        let h = self.tdnn.forward(s, bands)?;
        Ok((h, frames.iter().map(|&f| f - shrink).collect()))
    }
}

/// Raw `(low, band)` values placing filter `i` on `[e_i, e_{i+1}]` of a
/// linear grid over 30–3970 Hz.
pub fn sinc_init<T: Scalar>(filters: usize, spec: &SincSpec) -> (Tensor<T>, Tensor<T>) {
    let (lo, hi) = (30.0, 3970.0);
    let step = (hi - lo) / filters as f64;
    let low = (0..filters)
        .map(|i| T::from_f64_lossy(lo + step * i as f64 - spec.min_low_hz))
        .collect();
    let band = (0..filters).map(|_| T::from_f64_lossy(step - spec.min_band_hz)).collect();
    (
        Tensor::new(&[filters], low).expect("shape"),
        Tensor::new(&[filters], band).expect("shape"),
    )
}

#[derive(Clone, Debug)]
pub enum SpeechEncoder {
    Crnn(Crnn),
    XVector(XVector),
    SincNet(SincNet),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::realized_band;

    #[test]
    fn sinc_initial_bands_tile_the_spectrum() {
        let spec = SincSpec::new(251, 8000.0);
        let (low, band) = sinc_init::<f64>(80, &spec);
        let mut prev_hi = 30.0;
        for i in 0..80 {
            let (f1, f2) = realized_band(&spec, low.data()[i], band.data()[i]);
            assert!((f1 - prev_hi).abs() < 1e-9);
            prev_hi = f2;
        }
        assert!((prev_hi - 3970.0).abs() < 1e-9);
    }
}
