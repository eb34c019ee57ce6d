//! Batch and layer normalisation (the affine part is applied separately).

use super::tape::{GradStore, NormLayout, Node, Op, Var};
use super::{invalid, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-group statistics returned alongside a normalised variable.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of elements each statistic was computed over.
    pub count: usize,
}

/// Iterates the flat indices belonging to group `g`.
fn group_indices(shape: &[usize], layout: NormLayout) -> (usize, usize, Box<dyn Fn(usize, usize) -> usize>) {
    match layout {
        NormLayout::Channel => {
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            // group = channel; member m enumerates (batch, position)
            (
                c,
                n * inner,
                Box::new(move |g, m| (m / inner) * c * inner + g * inner + m % inner),
            )
        }
        NormLayout::LastAxis => {
            let d = *shape.last().expect("rank checked");
            let rows = shape.iter().product::<usize>() / d;
            (rows, d, Box::new(move |g, m| g * d + m))
        }
    }
}

fn normalize<'t, T: Scalar>(
    x: Var<'t, T>,
    layout: NormLayout,
    eps: T,
) -> Result<(Var<'t, T>, NormStats<T>), TensorError> {
    let v = x.value();
    let shape = v.shape();
    let min_rank = if layout == NormLayout::Channel { 2 } else { 1 };
    if shape.len() < min_rank {
        return Err(invalid("normalize", format!("shape {shape:?} has too few axes")));
    }
    let (groups, count, at) = group_indices(shape, layout);
    let n = T::from_usize(count).expect("count fits the scalar");
    let data = v.data();
    let mut out = vec![T::zero(); data.len()];
    let mut mean = Vec::with_capacity(groups);
    let mut var = Vec::with_capacity(groups);
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let mu = (0..count).map(|m| data[at(g, m)]).sum::<T>() / n;
        let sigma2 = (0..count)
            .map(|m| {
                let d = data[at(g, m)] - mu;
                d * d
            })
            .sum::<T>()
            / n;
        let inv = T::one() / (sigma2 + eps).sqrt();
        for m in 0..count {
            let i = at(g, m);
            out[i] = (data[i] - mu) * inv;
        }
        mean.push(mu);
        var.push(sigma2);
        inv_std.push(inv);
    }
    let rg = x.requires_grad();
    let y = x.tape.push(
        Tensor::from_parts(shape.to_vec(), out),
        Op::Normalize {
            x: x.id,
            layout,
            inv_std,
        },
        rg,
    );
    Ok((y, NormStats { mean, var, count }))
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Training-mode batch normalisation of `(N, C, ...)` per channel:
    /// zero mean and unit variance over batch and trailing axes.
    pub fn batch_normalize(self, eps: T) -> Result<(Var<'t, T>, NormStats<T>), TensorError> {
        normalize(self, NormLayout::Channel, eps)
    }

    /// Normalises every row over the last axis.
    pub fn layer_normalize(self, eps: T) -> Result<Var<'t, T>, TensorError> {
        normalize(self, NormLayout::LastAxis, eps).map(|(y, _)| y)
    }
}

pub(crate) fn normalize_backward<T: Scalar>(
    x: usize,
    layout: NormLayout,
    inv_std: &[T],
    out: usize,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
) {
    let y = nodes[out].value.data();
    let (groups, count, at) = group_indices(nodes[x].value.shape(), layout);
    let n = T::from_usize(count).expect("count fits the scalar");
    let mut dx = vec![T::zero(); y.len()];
    for (grp, &inv) in inv_std.iter().enumerate().take(groups) {
        let mut sum_g = T::zero();
        let mut sum_gy = T::zero();
        for m in 0..count {
            let i = at(grp, m);
            sum_g += g[i];
            sum_gy += g[i] * y[i];
        }
        for m in 0..count {
            let i = at(grp, m);
            dx[i] = inv / n * (n * g[i] - sum_g - y[i] * sum_gy);
        }
    }
    store.add(x, dx);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn batch_normalize_zero_mean_unit_variance() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[4, 2], &[1., 10., 2., 20., 3., 30., 4., 40.]).unwrap());
        let (y, stats) = x.batch_normalize(0.0).unwrap();
        assert_eq!(stats.mean, vec![2.5, 25.0]);
        assert_eq!(stats.count, 4);
        let v = y.value();
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| v.get(&[r, c])).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_layout_pools_trailing_axes() {
        let tape = Tape::<f64>::new();
        // (N=1, C=2, L=2)
        let x = tape.constant(Tensor::from_f64(&[1, 2, 2], &[1., 3., 10., 10.]).unwrap());
        let (y, stats) = x.batch_normalize(0.0).unwrap();
        assert_eq!(stats.mean, vec![2.0, 10.0]);
        assert_eq!(&y.value().data()[..2], &[-1., 1.]);
    }

    #[test]
    fn layer_normalize_rows() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[0., 2., 5., 7.]).unwrap());
        let y = x.layer_normalize(0.0).unwrap();
        assert_eq!(y.value().data(), &[-1., 1., -1., 1.]);
    }
}
