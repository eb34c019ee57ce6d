//! Central-difference verification of backward passes (64-bit only).

use super::{Tape, TensorError, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale:
/// `rel = |a − n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

impl GradCheckReport {
    pub(crate) fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>, tolerance: f64) -> Self {
        let (mut rel, mut abs, mut n) = (0.0f64, 0.0f64, 0);
        let mut finite = true;
        for (a, num) in pairs {
            finite &= a.is_finite() && num.is_finite();
            rel = rel.max(relative_error(a, num));
            abs = abs.max((a - num).abs());
            n += 1;
        }
        Self {
            max_rel_error: rel,
            max_abs_error: abs,
            checked: n,
            tolerance,
            passed: finite && rel <= tolerance,
        }
    }
}

/// Compares the backward gradient of scalar `f` at `point` against central
/// differences over every coordinate.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |values: Vec<f64>| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(point.shape(), values)?);
        Ok(f(&tape, x)?.value().item())
    };
    let mut pairs = Vec::with_capacity(point.numel());
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        pairs.push((a, numeric));
    }
    Ok(GradCheckReport::from_pairs(pairs, tolerance))
}
