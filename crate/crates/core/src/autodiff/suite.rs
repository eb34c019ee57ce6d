//! Finite-difference checks of every differentiable primitive at random
//! small shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{Conv1dGeometry, Conv2dGeometry, Pool2dGeometry};
use super::gradcheck::{finite_diff_check, GradCheckReport};
use super::sinc::SincSpec;
use super::{Tape, TensorError, Var};
use crate::tensor::Tensor;

/// Required agreement for single primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Loss = dyn for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>;

/// Fixed pseudo-random projection so no gradient is trivially symmetric.
fn project<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>, TensorError> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.754_877_666_2 + 0.13) % 1.0) * 2.0 - 1.0).collect();
    Ok(y.mul_const(Tensor::new(&shape, w)?)?.sum_all())
}

/// Splits the flat check point into consecutive blocks of the given shapes.
fn parts<'t>(x: Var<'t, f64>, shapes: &[&[usize]]) -> Result<Vec<Var<'t, f64>>, TensorError> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let v = x.narrow(0, at, n)?.reshape(s)?;
            at += n;
            Ok(v)
        })
        .collect()
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn extent(&mut self, lo: usize) -> usize {
        self.0.random_range(lo..=6)
    }

    fn values(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.0.random_range(lo..hi)).collect()
    }

    /// Values with magnitude in `[0.1, 1.5]`, away from kinks at zero.
    fn away_from_zero(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let m = self.0.random_range(0.1..1.5);
                if self.0.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect()
    }

    /// Distinct values at least 0.05 apart, so max selections are stable.
    fn distinct(&mut self, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5).collect();
        for i in (1..n).rev() {
            v.swap(i, self.0.random_range(0..=i));
        }
        v
    }
}

fn check(name: &'static str, point: Vec<f64>, f: Box<Loss>) -> Result<PrimitiveCheck, TensorError> {
    let n = point.len();
    let report = finite_diff_check(|t, x| f(t, x), &Tensor::new(&[n], point)?, PRIMITIVE_TOLERANCE)?;
    Ok(PrimitiveCheck { name, report })
}

/// Every primitive once, at shapes and values drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Result<Vec<PrimitiveCheck>, TensorError> {
    let mut s = Sampler(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();

    let (r, c) = (s.extent(1), s.extent(1));
    let binaries: [(&'static str, for<'a> fn(Var<'a, f64>, Var<'a, f64>) -> Result<Var<'a, f64>, TensorError>); 4] = [
        ("add", |a, b| a.add(b)),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
        ("div", |a, b| a.div(b)),
    ];
    for (name, op) in binaries {
        // the second operand broadcasts along rows and stays away from zero
        let mut p = s.values(r * c, -1.0, 1.0);
        p.extend(s.values(c, 0.5, 2.0));
        out.push(check(
            name,
            p,
            Box::new(move |_, x| {
                let v = parts(x, &[&[r, c], &[c]])?;
                project(op(v[0], v[1])?)
            }),
        )?);
    }

    let unaries: [(&'static str, fn(Var<'_, f64>) -> Var<'_, f64>, bool); 11] = [
        ("tanh", |x| x.tanh(), false),
        ("sigmoid", |x| x.sigmoid(), false),
        ("exp", |x| x.exp(), false),
        ("relu", |x| x.relu(), false),
        ("abs", |x| x.abs(), false),
        ("square", |x| x.square(), false),
        ("sqrt", |x| x.sqrt(), true),
        ("ln", |x| x.ln_clamped(1e-12), true),
        ("scale", |x| x.scale(-1.7), false),
        ("affine", |x| x.affine(0.3, 2.0), false),
        ("sum_all", |x| x.sum_all().scale(1.0), false),
    ];
    for (name, op, positive) in unaries {
        let n = s.extent(1) * s.extent(1);
        let p = if positive { s.values(n, 0.2, 2.0) } else { s.away_from_zero(n) };
        out.push(check(name, p, Box::new(move |_, x| project(op(x))))?);
    }

    let (a, b, k) = (s.extent(1), s.extent(1), s.extent(1));
    let axis = s.0.random_range(0..3);
    out.push(check(
        "softmax",
        s.values(a * b * k, -2.0, 2.0),
        Box::new(move |_, x| project(x.reshape(&[a, b, k])?.softmax(axis)?)),
    )?);
    out.push(check(
        "sum_axis",
        s.values(a * b * k, -2.0, 2.0),
        Box::new(move |_, x| project(x.reshape(&[a, b, k])?.sum_axis(axis)?)),
    )?);
    out.push(check(
        "mean_axis",
        s.values(a * b * k, -2.0, 2.0),
        Box::new(move |_, x| project(x.reshape(&[a, b, k])?.mean_axis(axis)?)),
    )?);
    out.push(check(
        "permute",
        s.values(a * b * k, -2.0, 2.0),
        Box::new(move |_, x| project(x.reshape(&[a, b, k])?.permute(&[2, 0, 1])?)),
    )?);
    let start = s.0.random_range(0..k);
    out.push(check(
        "narrow",
        s.values(a * b * k, -2.0, 2.0),
        Box::new(move |_, x| project(x.reshape(&[a, b, k])?.narrow(2, start, k - start)?)),
    )?);
    out.push(check(
        "select",
        s.values(a * b * k, -2.0, 2.0),
        Box::new(move |_, x| project(x.reshape(&[a, b, k])?.select(2, start)?)),
    )?);
    let k2 = s.extent(1);
    out.push(check(
        "concat",
        s.values(a * b * (k + k2), -2.0, 2.0),
        Box::new(move |_, x| {
            let v = parts(x, &[&[a, b, k], &[a, b, k2]])?;
            project(Var::concat(&[v[0], v[1]], 2)?)
        }),
    )?);
    out.push(check(
        "stack",
        s.values(2 * a * b, -2.0, 2.0),
        Box::new(move |_, x| {
            let v = parts(x, &[&[a, b], &[a, b]])?;
            project(Var::stack(&[v[0], v[1]], 1)?)
        }),
    )?);

    let (m, kk, n) = (s.extent(1), s.extent(1), s.extent(1));
    out.push(check(
        "matmul",
        s.values(m * kk + kk * n, -1.0, 1.0),
        Box::new(move |_, x| {
            let v = parts(x, &[&[m, kk], &[kk, n]])?;
            project(v[0].matmul(v[1])?)
        }),
    )?);
    let bt = s.extent(1);
    out.push(check(
        "bmm",
        s.values(bt * (m * kk + kk * n), -1.0, 1.0),
        Box::new(move |_, x| {
            let v = parts(x, &[&[bt, m, kk], &[bt, kk, n]])?;
            project(v[0].bmm(v[1])?)
        }),
    )?);

    let (cb, cin, cout, kw) = (s.extent(1).min(3), s.extent(1).min(3), s.extent(1).min(3), s.0.random_range(1..=3));
    let g1 = Conv1dGeometry {
        stride: s.0.random_range(1..=2),
        dilation: s.0.random_range(1..=2),
        pad_left: s.0.random_range(0..=2),
        pad_right: s.0.random_range(0..=2),
    };
    let len = 6;
    out.push(check(
        "conv1d",
        s.values(cb * cin * len + cout * cin * kw, -1.0, 1.0),
        Box::new(move |_, x| {
            let v = parts(x, &[&[cb, cin, len], &[cout, cin, kw]])?;
            project(v[0].conv1d(v[1], g1)?)
        }),
    )?);
    let (h, w, kh) = (s.extent(3), s.extent(3), s.0.random_range(1..=3));
    let g2 = Conv2dGeometry {
        pad: [s.0.random_range(0..=1), s.0.random_range(0..=1), s.0.random_range(0..=1), s.0.random_range(0..=1)],
    };
    out.push(check(
        "conv2d",
        s.values(cb * cin * h * w + cout * cin * kh * kw, -1.0, 1.0),
        Box::new(move |_, x| {
            let v = parts(x, &[&[cb, cin, h, w], &[cout, cin, kh, kw]])?;
            project(v[0].conv2d(v[1], g2)?)
        }),
    )?);
    let overlap = Pool2dGeometry {
        kernel: [3, 1],
        stride: [1, 1],
        pad: [1, 0],
    };
    for (name, geom) in [("max_pool2d", Pool2dGeometry::tiles(2, 2)), ("max_pool2d_overlap", overlap)] {
        out.push(check(
            name,
            s.distinct(cb * cin * h * w),
            Box::new(move |_, x| project(x.reshape(&[cb, cin, h, w])?.max_pool2d(geom)?)),
        )?);
    }

    let (nb, nc, nt) = (s.extent(3), s.extent(1), s.extent(1));
    out.push(check(
        "batch_normalize",
        s.values(nb * nc * nt, -2.0, 2.0),
        Box::new(move |_, x| project(x.reshape(&[nb, nc, nt])?.batch_normalize(1e-5)?.0)),
    )?);
    out.push(check(
        "layer_normalize",
        s.values(nb * nc * (nt + 1), -2.0, 2.0),
        Box::new(move |_, x| project(x.reshape(&[nb, nc, nt + 1])?.layer_normalize(1e-5)?)),
    )?);

    let (vocab, dim) = (s.extent(3), s.extent(1));
    let ids: Vec<usize> = (0..6).map(|_| s.0.random_range(0..vocab)).collect();
    out.push(check(
        "embedding",
        s.values(vocab * dim, -1.0, 1.0),
        Box::new(move |t, x| project(t.embedding(x.reshape(&[vocab, dim])?, &ids, &[2, 3], None)?)),
    )?);

    let rows = s.extent(1);
    let labels: Vec<usize> = (0..rows).map(|_| s.0.random_range(0..2)).collect();
    let weighted = labels.clone();
    out.push(check(
        "cross_entropy",
        s.values(rows * 2, -2.0, 2.0),
        Box::new(move |_, x| x.reshape(&[rows, 2])?.softmax(1)?.cross_entropy(&labels, None)),
    )?);
    out.push(check(
        "cross_entropy_weighted",
        s.values(rows * 2, -2.0, 2.0),
        Box::new(move |_, x| x.reshape(&[rows, 2])?.softmax(1)?.cross_entropy(&weighted, Some(&[0.7, 1.9]))),
    )?);

    let filters = s.extent(1);
    let spec = SincSpec::new(15, 8000.0);
    let mut p = s.values(filters, 100.0, 1500.0);
    p.extend(s.values(filters, 200.0, 1500.0));
    out.push(check(
        "sinc_kernel",
        p,
        Box::new(move |t, x| {
            let v = parts(x, &[&[filters], &[filters]])?;
            project(t.sinc_kernel(v[0], v[1], spec)?)
        }),
    )?);
    Ok(out)
}
