//! Cross-entropy over class probabilities.

use super::tape::{GradStore, Node, Op, Var};
use super::{invalid, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities below this are clamped before the log.
pub const PROB_FLOOR: f64 = 1e-12;
const ROW_SUM_TOLERANCE: f64 = 1e-5;

impl<'t, T: Scalar> Var<'t, T> {
    /// Mean negative log-likelihood of `labels` under the `(batch × classes)`
    /// probability rows. `weights`, when given, are per-class and the mean
    /// becomes `Σ w_y·(−ln p_y) / Σ w_y`.
    pub fn cross_entropy(self, labels: &[usize], weights: Option<&[T]>) -> Result<Var<'t, T>, TensorError> {
        let p = self.value();
        if p.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "cross_entropy",
                expected: 2,
                shape: p.shape().to_vec(),
            });
        }
        let (batch, classes) = (p.shape()[0], p.shape()[1]);
        if labels.len() != batch {
            return Err(invalid("cross_entropy", format!("{} labels for {batch} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid("cross_entropy", format!("label {bad} outside {classes} classes")));
        }
        if let Some(w) = weights {
            if w.len() != classes {
                return Err(invalid("cross_entropy", "one weight per class required"));
            }
        }
        let data = p.data();
        for r in 0..batch {
            let s: f64 = data[r * classes..(r + 1) * classes].iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE || !s.is_finite() {
                return Err(invalid("cross_entropy", format!("row {r} sums to {s}, not 1")));
            }
        }
        let floor = T::from_f64_lossy(PROB_FLOOR);
        let per_sample: Vec<T> = labels
            .iter()
            .map(|&l| weights.map_or(T::one(), |w| w[l]))
            .collect();
        let total: T = per_sample.iter().copied().sum();
        let mut loss = T::zero();
        for (r, (&l, &w)) in labels.iter().zip(&per_sample).enumerate() {
            loss += -w * data[r * classes + l].max(floor).ln();
        }
        loss /= total;
        let norm: Vec<T> = per_sample.iter().map(|&w| w / total).collect();
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p: self.id,
                labels: labels.to_vec(),
                weights: norm,
            },
            rg,
        ))
    }
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    p: usize,
    labels: &[usize],
    weights: &[T],
    nodes: &[Node<T>],
    g: T,
    store: &mut GradStore<T>,
) {
    let pv = &nodes[p].value;
    let classes = pv.shape()[1];
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let data = pv.data();
    let slot = store.slot(p, pv.numel());
    for (r, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        let prob = data[r * classes + l];
        if prob > floor {
            slot[r * classes + l] += -g * w / prob;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn ce(rows: &[f64], classes: usize, labels: &[usize]) -> f64 {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(&[rows.len() / classes, classes], rows).unwrap());
        p.cross_entropy(labels, None).unwrap().value().item()
    }

    #[test]
    fn worked_examples() {
        assert!((ce(&[0.5, 0.5], 2, &[1]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(ce(&[1.0, 0.0], 2, &[0]), 0.0);
        let want = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((ce(&[0.9, 0.1, 0.2, 0.8], 2, &[0, 1]) - want).abs() < 1e-15);
        assert!((want - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let v = ce(&[1.0, 0.0], 2, &[1]);
        assert!((v - (-(PROB_FLOOR).ln())).abs() < 1e-9);
        assert!(v.is_finite());
    }

    #[test]
    fn softmax_then_cross_entropy_gradient() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_f64(&[1, 2], &[0., 0.]).unwrap(), true);
        let loss = logits.softmax(1).unwrap().cross_entropy(&[0], None).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap().data().to_vec();
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_unnormalised_rows_and_bad_labels() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(&[1, 2], &[0.7, 0.7]).unwrap());
        assert!(p.cross_entropy(&[0], None).is_err());
        let q = tape.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap());
        assert!(q.cross_entropy(&[2], None).is_err());
    }

    #[test]
    fn class_weights_reweight_the_mean() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64(&[2, 2], &[0.5, 0.5, 0.2, 0.8]).unwrap());
        let w = [1.0, 3.0];
        let got = p.cross_entropy(&[0, 1], Some(&w)).unwrap().value().item();
        let want = (-(0.5f64).ln() - 3.0 * (0.8f64).ln()) / 4.0;
        assert!((got - want).abs() < 1e-15);
    }
}
