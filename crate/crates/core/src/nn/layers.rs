use rand::Rng;

use crate::autodiff::{TensorError, Var};
use crate::params::{init, BufferId, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y = x W + b` over the last axis; `W` is stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            init::glorot_uniform(rng, &[inputs, outputs], inputs, outputs),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Self { w, b, inputs, outputs }
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        let last = *shape.last().unwrap_or(&0);
        if last != self.inputs {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: shape,
                right: vec![self.inputs, self.outputs],
            });
        }
        let rows = shape.iter().product::<usize>() / last;
        let mut y = x.reshape(&[rows, last])?.matmul(s.param(self.w))?;
        if let Some(b) = self.b {
            y = y.add(s.param(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank checked") = self.outputs;
        y.reshape(&out_shape)
    }
}

/// Per-feature normalisation over `(batch, features)` inputs with a
/// learned scale/shift and running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub features: usize,
}

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[features])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[features])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[features])),
            features,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.features {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: shape,
                right: vec![self.features],
            });
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let normalized = if s.training() {
            let (y, stats) = x.batch_normalize(eps)?;
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let keep = T::one() - m;
            let n = T::from_usize(stats.count).expect("count fits");
            // unbiased estimate for the running variance
            let correction = if stats.count > 1 { n / (n - T::one()) } else { T::one() };
            let rm = s.buffer(self.running_mean).data();
            let rv = s.buffer(self.running_var).data();
            let new_mean = rm.iter().zip(&stats.mean).map(|(&r, &b)| m * r + keep * b).collect();
            let new_var = rv
                .iter()
                .zip(&stats.var)
                .map(|(&r, &b)| m * r + keep * b * correction)
                .collect();
            s.update_buffer(self.running_mean, Tensor::new(&[self.features], new_mean)?);
            s.update_buffer(self.running_var, Tensor::new(&[self.features], new_var)?);
            y
        } else {
            let rm = s.buffer(self.running_mean);
            let inv: Vec<T> = s
                .buffer(self.running_var)
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            x.add_const(rm.map(|v| -v))?
                .mul_const(Tensor::new(&[self.features], inv)?)?
        };
        normalized.mul(s.param(self.gamma))?.add(s.param(self.beta))
    }
}

/// Affine layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[features])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features])),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.layer_normalize(T::from_f64_lossy(LN_EPS))?
            .mul(s.param(self.gamma))?
            .add(s.param(self.beta))
    }
}

/// Token embedding table whose padding row stays at zero.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub pad: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, vocab: usize, dim: usize, pad: usize) -> Self {
        let mut t: Tensor<T> = init::normal(rng, &[vocab, dim], 1.0);
        t.data_mut()[pad * dim..(pad + 1) * dim].fill(T::zero());
        let table = store.add(format!("{name}.table"), t);
        store.freeze_row(table, pad);
        Self { table, pad, dim }
    }

    /// `(batch, len)` ids → `(batch, len, dim)`.
    pub fn forward<'t, T: Scalar>(
        &self,
        s: &Session<'t, '_, T>,
        ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Var<'t, T>, TensorError> {
        s.tape.embedding(s.param(self.table), ids, &[batch, len], Some(self.pad))
    }
}

/// `(batch, len)` 0/1 validity mask from sequence lengths.
pub fn length_mask<T: Scalar>(lengths: &[usize], len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); lengths.len() * len];
    for (b, &l) in lengths.iter().enumerate() {
        data[b * len..b * len + l.min(len)].fill(T::one());
    }
    Tensor::new(&[lengths.len(), len], data).expect("mask shape")
}

/// Logit bias masking padded positions: 0 where valid, −1e9 elsewhere.
pub const MASK_LOGIT: f64 = -1e9;

pub fn additive_mask<T: Scalar>(lengths: &[usize], len: usize) -> Tensor<T> {
    length_mask::<T>(lengths, len).map(|m| (T::one() - m) * T::from_f64_lossy(MASK_LOGIT))
}
