//! Parameterised band-pass kernels for the sinc front end.
//!
//! Each filter is the difference of two windowed low-pass sinc responses,
//! `g[n] = w[n] · (sin(2π f2 n / sr) − sin(2π f1 n / sr)) / (π n)`, with
//! `g[0] = w[0] · 2 (f2 − f1) / sr`. The learnable raw values are mapped
//! onto cutoffs satisfying `0 < f1 < f2 ≤ sr / 2`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tape::{GradStore, Node, Op, Var};
use super::{invalid, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SincSpec {
    /// Odd kernel length.
    pub kernel_len: usize,
    pub sample_rate: f64,
    /// Lowest realisable low cutoff, Hz.
    pub min_low_hz: f64,
    /// Smallest realisable bandwidth, Hz.
    pub min_band_hz: f64,
}

impl SincSpec {
    pub fn new(kernel_len: usize, sample_rate: f64) -> Self {
        Self {
            kernel_len,
            sample_rate,
            min_low_hz: 1.0,
            min_band_hz: 0.01,
        }
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate / 2.0
    }

    fn hamming(&self, m: usize) -> f64 {
        0.54 - 0.46 * (2.0 * PI * m as f64 / (self.kernel_len - 1) as f64).cos()
    }
}

/// Realised `(f1, f2)` in Hz plus the local derivatives
/// `(df1/dlow, df2/dlow, df2/dband)`.
fn realize(spec: &SincSpec, low: f64, band: f64) -> ((f64, f64), (f64, f64, f64)) {
    let nyq = spec.nyquist();
    let raw_f1 = spec.min_low_hz + low.abs();
    let f1_cap = nyq - spec.min_band_hz;
    let (f1, df1) = if raw_f1 < f1_cap {
        (raw_f1, sign(low))
    } else {
        (f1_cap, 0.0)
    };
    let raw_f2 = f1 + spec.min_band_hz + band.abs();
    let (f2, df2_low, df2_band) = if raw_f2 < nyq {
        (raw_f2, df1, sign(band))
    } else {
        (nyq, 0.0, 0.0)
    };
    ((f1, f2), (df1, df2_low, df2_band))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cutoffs `(f1, f2)` in Hz realised from raw parameter values.
pub fn realized_band(spec: &SincSpec, low_raw: f64, band_raw: f64) -> (f64, f64) {
    realize(spec, low_raw, band_raw).0
}

impl<T: Scalar> super::Tape<T> {
    /// Builds the `(filters × kernel_len)` band-pass bank from raw `low`
    /// and `band` vectors (one entry per filter).
    pub fn sinc_kernel<'t>(
        &'t self,
        low: Var<'t, T>,
        band: Var<'t, T>,
        spec: SincSpec,
    ) -> Result<Var<'t, T>, TensorError> {
        let (lv, bv) = (low.value(), band.value());
        if lv.rank() != 1 || lv.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sinc_kernel",
                left: lv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        if spec.kernel_len < 3 || spec.kernel_len.is_multiple_of(2) {
            return Err(invalid("sinc_kernel", "kernel length must be odd and at least 3"));
        }
        let k = spec.kernel_len;
        let half = (k / 2) as isize;
        let sr = spec.sample_rate;
        let mut out = Vec::with_capacity(lv.numel() * k);
        for (&l, &b) in lv.data().iter().zip(bv.data()) {
            let ((f1, f2), _) = realize(&spec, l.as_f64(), b.as_f64());
            for m in 0..k {
                let n = m as isize - half;
                let v = if n == 0 {
                    2.0 * (f2 - f1) / sr
                } else {
                    let n = n as f64;
                    ((2.0 * PI * f2 * n / sr).sin() - (2.0 * PI * f1 * n / sr).sin()) / (PI * n)
                };
                out.push(T::from_f64_lossy(v * spec.hamming(m)));
            }
        }
        let rg = self.requires(&[low.id, band.id]);
        Ok(self.push(
            Tensor::from_parts(vec![lv.numel(), k], out),
            Op::SincKernel {
                low: low.id,
                band: band.id,
                spec,
            },
            rg,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sinc_backward<T: Scalar>(
    low: usize,
    band: usize,
    spec: &SincSpec,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
    want_low: bool,
    want_band: bool,
) {
    let (lv, bv) = (nodes[low].value.data(), nodes[band].value.data());
    let k = spec.kernel_len;
    let half = (k / 2) as isize;
    let sr = spec.sample_rate;
    let mut d_low = vec![T::zero(); lv.len()];
    let mut d_band = vec![T::zero(); lv.len()];
    for f in 0..lv.len() {
        let ((f1, f2), (df1, df2_low, df2_band)) = realize(spec, lv[f].as_f64(), bv[f].as_f64());
        let (mut g_f1, mut g_f2) = (0.0, 0.0);
        for m in 0..k {
            let n = (m as isize - half) as f64;
            let w = spec.hamming(m) * g[f * k + m].as_f64();
            g_f2 += w * 2.0 * (2.0 * PI * f2 * n / sr).cos() / sr;
            g_f1 -= w * 2.0 * (2.0 * PI * f1 * n / sr).cos() / sr;
        }
        d_low[f] = T::from_f64_lossy(g_f1 * df1 + g_f2 * df2_low);
        d_band[f] = T::from_f64_lossy(g_f2 * df2_band);
    }
    if want_low {
        store.add(low, d_low);
    }
    if want_band {
        store.add(band, d_band);
    }
}
