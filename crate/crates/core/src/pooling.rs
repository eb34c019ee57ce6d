//! Temporal pooling and cross-modal fusion.
//!
//! Hidden maps are `(batch, time, features)`; `lengths` gives each row's
//! number of valid steps and padded steps never influence the result.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{TensorError, Var};
use crate::nn::layers::{additive_mask, length_mask, Linear};
use crate::params::{init, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon inside the square root of the statistics-pooling deviation.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    SelfAttention,
    Statistics,
    Average,
    Sum,
}

impl PoolingKind {
    /// Pooled size for a `dim`-wide hidden map.
    pub fn output_dim(self, dim: usize) -> usize {
        match self {
            PoolingKind::Statistics => 2 * dim,
            _ => dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::SelfAttention => "self_attention",
            PoolingKind::Statistics => "statistics",
            PoolingKind::Average => "average",
            PoolingKind::Sum => "sum",
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "self_attention" => Ok(Self::SelfAttention),
            "statistics" => Ok(Self::Statistics),
            "average" => Ok(Self::Average),
            "sum" => Ok(Self::Sum),
            other => Err(format!("unknown pooling `{other}` (self_attention|statistics|average|sum)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    ModalAttention,
    Concat,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::ModalAttention => "modal_attention",
            FusionKind::Concat => "concat",
        })
    }
}

impl FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "modal_attention" => Ok(Self::ModalAttention),
            "concat" => Ok(Self::Concat),
            other => Err(format!("unknown fusion `{other}` (modal_attention|concat)")),
        }
    }
}

fn check_map<T: Scalar>(op: &'static str, h: &Var<'_, T>, lengths: &[usize], min_len: usize) -> Result<(usize, usize, usize), TensorError> {
    let shape = h.shape();
    if shape.len() != 3 {
        return Err(TensorError::RankMismatch { op, expected: 3, shape });
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if lengths.len() != b {
        return Err(crate::autodiff::invalid(op, format!("{} lengths for batch {b}", lengths.len())));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l < min_len || l > t) {
        return Err(crate::autodiff::invalid(
            op,
            format!("sequence length {l} outside [{min_len}, {t}]"),
        ));
    }
    Ok((b, t, d))
}

/// Per-row reciprocal lengths, `(batch, 1)`.
fn inverse_lengths<T: Scalar>(lengths: &[usize]) -> Tensor<T> {
    let inv = lengths.iter().map(|&l| T::one() / T::from_usize(l).expect("length fits")).collect();
    Tensor::new(&[lengths.len(), 1], inv).expect("shape")
}

/// Masked sum over time: `(B, T, D)` → `(B, D)`.
fn masked_sum<'t, T: Scalar>(h: Var<'t, T>, lengths: &[usize]) -> Result<Var<'t, T>, TensorError> {
    let (b, t, _) = check_map("masked_sum", &h, lengths, 1)?;
    let mask = length_mask::<T>(lengths, t).reshape(&[b, t, 1])?;
    h.mul_const(mask)?.sum_axis(1)
}

/// Attention pooling: `H* = tanh(H)`, `α = softmax(H* w)` over valid
/// steps, `e = tanh(Σ_t α_t H_t)`. Returns `(e, α)`.
pub fn self_attention_pool<'t, T: Scalar>(
    h: Var<'t, T>,
    w: Var<'t, T>,
    lengths: &[usize],
) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
    let (b, t, d) = check_map("self_attention_pool", &h, lengths, 1)?;
    let logits = h
        .tanh()
        .reshape(&[b * t, d])?
        .matmul(w.reshape(&[d, 1])?)?
        .reshape(&[b, t])?
        .add_const(additive_mask(lengths, t))?;
    let alpha = logits.softmax(1)?;
    let e = alpha.reshape(&[b, 1, t])?.bmm(h)?.reshape(&[b, d])?.tanh();
    Ok((e, alpha))
}

/// Mean and population standard deviation over valid steps, concatenated
/// to `(B, 2D)`. Needs at least two valid steps per row.
pub fn statistics_pool<'t, T: Scalar>(h: Var<'t, T>, lengths: &[usize]) -> Result<Var<'t, T>, TensorError> {
    let (b, t, d) = check_map("statistics_pool", &h, lengths, 2)?;
    let inv = inverse_lengths::<T>(lengths);
    let mean = masked_sum(h, lengths)?.mul_const(inv.clone())?;
    let centered = h.sub(mean.reshape(&[b, 1, d])?)?;
    let mask = length_mask::<T>(lengths, t).reshape(&[b, t, 1])?;
    let var = centered.square().mul_const(mask)?.sum_axis(1)?.mul_const(inv)?;
    let std = var.add_const(Tensor::scalar(T::from_f64_lossy(STD_EPS)))?.sqrt();
    Var::concat(&[mean, std], 1)
}

/// Plain temporal mean (`Average`) or sum (`Sum`) over valid steps.
pub fn fixed_pool<'t, T: Scalar>(h: Var<'t, T>, lengths: &[usize], kind: PoolingKind) -> Result<Var<'t, T>, TensorError> {
    let sum = masked_sum(h, lengths)?;
    match kind {
        PoolingKind::Sum => Ok(sum),
        PoolingKind::Average => sum.mul_const(inverse_lengths(lengths)),
        other => Err(crate::autodiff::invalid("fixed_pool", format!("{other} is not a fixed pooling"))),
    }
}

/// Cross-modal attention of each speech step onto the text sequence.
///
/// `e_ij = h_iˢᵀ W_a h_jᵗ`, `α_i = softmax_j(e_i)` over valid text steps,
/// `c_i = Σ_j α_ij h_jᵗ`, `f_i = tanh(W_b [c_i, h_iˢ])`.
/// `w_a` is `(ds, dt)` and `w_b` is `(df, dt + ds)`. Returns `(f, α)`
/// with `f: (B, n, df)` and `α: (B, n, m)`.
pub fn modal_attention_fuse<'t, T: Scalar>(
    hs: Var<'t, T>,
    ht: Var<'t, T>,
    text_lengths: &[usize],
    w_a: Var<'t, T>,
    w_b: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
    let ss = hs.shape();
    let (b, m, dt) = check_map("modal_attention_fuse", &ht, text_lengths, 1)?;
    if ss.len() != 3 || ss[0] != b || ss[1] == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "modal_attention_fuse",
            left: ss,
            right: ht.shape(),
        });
    }
    let (n, ds) = (ss[1], ss[2]);
    let (wa, wb) = (w_a.shape(), w_b.shape());
    if wa != [ds, dt] || wb.len() != 2 || wb[1] != dt + ds {
        return Err(TensorError::ShapeMismatch {
            op: "modal_attention_fuse",
            left: wa,
            right: wb,
        });
    }
    let df = wb[0];
    let scores = hs
        .reshape(&[b * n, ds])?
        .matmul(w_a)?
        .reshape(&[b, n, dt])?
        .bmm(ht.transpose(1, 2)?)?
        .add_const(additive_mask::<T>(text_lengths, m).reshape(&[b, 1, m])?)?;
    let alpha = scores.softmax(2)?;
    let context = alpha.bmm(ht)?;
    let joint = Var::concat(&[context, hs], 2)?.reshape(&[b * n, dt + ds])?;
    let f = joint.matmul(w_b.transpose(0, 1)?)?.reshape(&[b, n, df])?.tanh();
    Ok((f, alpha))
}

/// Learnable attention pooling vector.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub w: ParamId,
}

impl AttentionPool {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        let w = init::glorot_uniform::<T>(rng, &[dim], dim, 1);
        Self {
            w: store.add(format!("{name}.w"), w),
        }
    }
}

/// A pooling stage mapping `(B, T, D)` to the `(B, out)` embedding.
/// Statistics pooling is followed by an affine map back to `D`.
#[derive(Clone, Debug)]
pub struct Pooler {
    pub kind: PoolingKind,
    pub attention: Option<AttentionPool>,
    pub segment: Option<Linear>,
}

impl Pooler {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, kind: PoolingKind, dim: usize) -> Self {
        Self {
            kind,
            attention: (kind == PoolingKind::SelfAttention).then(|| AttentionPool::new(store, rng, &format!("{name}.attention"), dim)),
            segment: (kind == PoolingKind::Statistics).then(|| Linear::new(store, rng, &format!("{name}.segment"), 2 * dim, dim, true)),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, h: Var<'t, T>, lengths: &[usize]) -> Result<Var<'t, T>, TensorError> {
        match self.kind {
            PoolingKind::SelfAttention => {
                let w = s.param(self.attention.as_ref().expect("attention vector").w);
                Ok(self_attention_pool(h, w, lengths)?.0)
            }
            PoolingKind::Statistics => {
                let stats = statistics_pool(h, lengths)?;
                self.segment.as_ref().expect("segment layer").forward(s, stats)
            }
            kind => fixed_pool(h, lengths, kind),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModalAttention {
    pub w_a: ParamId,
    pub w_b: ParamId,
}

impl ModalAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, speech: usize, text: usize, fused: usize) -> Self {
        Self {
            w_a: store.add(format!("{name}.w_a"), init::glorot_uniform(rng, &[speech, text], speech, text)),
            w_b: store.add(
                format!("{name}.w_b"),
                init::glorot_uniform(rng, &[fused, text + speech], text + speech, fused),
            ),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        s: &Session<'t, '_, T>,
        hs: Var<'t, T>,
        ht: Var<'t, T>,
        text_lengths: &[usize],
    ) -> Result<Var<'t, T>, TensorError> {
        Ok(modal_attention_fuse(hs, ht, text_lengths, s.param(self.w_a), s.param(self.w_b))?.0)
    }
}

/// Concatenation fusion: `tanh(W [speech, text] + b)`.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub linear: Linear,
}

impl ConcatFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, speech: usize, text: usize, out: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, name, speech + text, out, true),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, speech: Var<'t, T>, text: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = (speech.shape(), text.shape());
        if a.len() != 2 || b.len() != 2 || a[0] != b[0] || a[1] + b[1] != self.linear.inputs {
            return Err(TensorError::ShapeMismatch {
                op: "concat_fuse",
                left: a,
                right: b,
            });
        }
        Ok(self.linear.forward(s, Var::concat(&[speech, text], 1)?)?.tanh())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn attention_pool_worked_example() {
        // H given as h^b × t = [[1,2],[0,-1]]; our layout is (B, t, h^b)
        let tape = Tape::<f64>::new();
        let h = tape.constant(t(&[1, 2, 2], &[1., 0., 2., -1.]));
        let w = tape.constant(t(&[2], &[1., 0.]));
        let (e, alpha) = self_attention_pool(h, w, &[2]).unwrap();
        let (l1, l2) = (1f64.tanh(), 2f64.tanh());
        let a1 = l1.exp() / (l1.exp() + l2.exp());
        let a = alpha.value();
        assert!((a.data()[0] - a1).abs() < 1e-12 && (a.data()[1] - (1.0 - a1)).abs() < 1e-12);
        let e = e.value();
        assert!((e.data()[0] - (a1 + 2.0 * (1.0 - a1)).tanh()).abs() < 1e-12);
        assert!((e.data()[1] - (-(1.0 - a1)).tanh()).abs() < 1e-12);
        assert!((a.data()[0] - 0.44957).abs() < 1e-5 && (a.data()[1] - 0.55043).abs() < 1e-5);
        assert!((e.data()[0] - 0.91386).abs() < 1e-5 && (e.data()[1] + 0.50085).abs() < 1e-5);
    }

    #[test]
    fn statistics_two_point_row() {
        let tape = Tape::<f64>::new();
        let h = tape.constant(t(&[1, 2, 1], &[1., 3.]));
        let v = statistics_pool(h, &[2]).unwrap().value();
        assert!((v.data()[0] - 2.0).abs() < 1e-12);
        assert!((v.data()[1] - (1.0 + STD_EPS).sqrt()).abs() < 1e-12);
        let short = tape.constant(t(&[1, 2, 1], &[1., 3.]));
        assert!(statistics_pool(short, &[1]).is_err());
    }

    #[test]
    fn fixed_pool_ignores_padding() {
        let tape = Tape::<f64>::new();
        let h = tape.constant(t(&[1, 3, 1], &[2., 4., 100.]));
        assert_eq!(fixed_pool(h, &[2], PoolingKind::Sum).unwrap().value().data(), &[6.0]);
        assert_eq!(fixed_pool(h, &[2], PoolingKind::Average).unwrap().value().data(), &[3.0]);
    }

    #[test]
    fn modal_attention_worked_example() {
        let tape = Tape::<f64>::new();
        let hs = tape.constant(t(&[1, 1, 2], &[1., 0.]));
        let ht = tape.constant(t(&[1, 2, 2], &[1., 0., 0., 1.]));
        let wa = tape.constant(Tensor::eye(2));
        let wb = tape.constant(Tensor::zeros(&[2, 4]));
        let (f, alpha) = modal_attention_fuse(hs, ht, &[2], wa, wb).unwrap();
        let a = alpha.value();
        let want = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((a.data()[0] - want).abs() < 1e-12);
        assert!((a.data()[0] - 0.73106).abs() < 1e-5 && (a.data()[1] - 0.26894).abs() < 1e-5);
        assert_eq!(f.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn names_round_trip() {
        for k in [PoolingKind::SelfAttention, PoolingKind::Statistics, PoolingKind::Average, PoolingKind::Sum] {
            assert_eq!(k.to_string().parse::<PoolingKind>().unwrap(), k);
        }
        assert!("max".parse::<PoolingKind>().is_err());
        assert_eq!("concat".parse::<FusionKind>().unwrap(), FusionKind::Concat);
    }
}
