//! Pointwise activations, scaling and softmax.

use super::tape::{GradStore, Node, Op, UnaryKind, Var};
use super::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn unary_forward<T: Scalar>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log(floor) => x.max(T::from_f64_lossy(floor)).ln(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Abs => x.abs(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    // split on sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Derivative given input `x` and output `y`.
fn unary_derivative<T: Scalar>(kind: UnaryKind, x: T, y: T) -> T {
    let one = T::one();
    match kind {
        UnaryKind::Tanh => one - y * y,
        UnaryKind::Relu => {
            if x > T::zero() {
                one
            } else {
                T::zero()
            }
        }
        UnaryKind::Sigmoid => y * (one - y),
        UnaryKind::Exp => y,
        UnaryKind::Log(floor) => {
            if x > T::from_f64_lossy(floor) {
                one / x
            } else {
                T::zero()
            }
        }
        UnaryKind::Sqrt => {
            if y > T::zero() {
                T::from_f64_lossy(0.5) / y
            } else {
                T::zero()
            }
        }
        UnaryKind::Square => (one + one) * x,
        UnaryKind::Abs => {
            if x > T::zero() {
                one
            } else if x < T::zero() {
                -one
            } else {
                T::zero()
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, kind: UnaryKind) -> Var<'t, T> {
        let v = self.value();
        let out = v.map(|x| unary_forward(kind, x));
        let rg = self.requires_grad();
        self.tape.push(out, Op::Unary { kind, x: self.id }, rg)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(self, floor: f64) -> Var<'t, T> {
        self.unary(UnaryKind::Log(floor))
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(UnaryKind::Square)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(UnaryKind::Abs)
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * factor);
        let rg = self.requires_grad();
        self.tape.push(out, Op::Scale { x: self.id, factor }, rg)
    }

    /// `factor * x + offset`.
    pub fn affine(self, factor: T, offset: T) -> Var<'t, T> {
        let scaled = self.scale(factor);
        if offset == T::zero() {
            return scaled;
        }
        scaled
            .add_const(Tensor::scalar(offset))
            .expect("scalar broadcasts against any shape")
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        if !v.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |k: usize| base + k * inner;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(x[at(k)]);
                }
                let mut sum = T::zero();
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Softmax { x: self.id, axis },
            rg,
        ))
    }
}

/// `(outer, axis_len, inner)` decomposition of a row-major shape.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn unary_backward<T: Scalar>(
    kind: UnaryKind,
    x: usize,
    out: usize,
    nodes: &[Node<T>],
    mut g: Vec<T>,
    store: &mut GradStore<T>,
) {
    let xs = nodes[x].value.data();
    let ys = nodes[out].value.data();
    for ((gi, &xi), &yi) in g.iter_mut().zip(xs).zip(ys) {
        *gi *= unary_derivative(kind, xi, yi);
    }
    store.add(x, g);
}

pub(crate) fn softmax_backward<T: Scalar>(
    x: usize,
    axis: usize,
    out: usize,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
) {
    let y = nodes[out].value.data();
    let (outer, len, inner) = split_axis(nodes[out].value.shape(), axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                let j = base + k * inner;
                dot += g[j] * y[j];
            }
            for k in 0..len {
                let j = base + k * inner;
                dx[j] = y[j] * (g[j] - dot);
            }
        }
    }
    store.add(x, dx);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64(&[2], &[0., 0.]).unwrap());
        assert_eq!(z.softmax(0).unwrap().value().data(), &[0.5, 0.5]);

        // direct exp/sum at 64-bit: e^k / (e + e^2 + e^3)
        let x = tape.constant(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let s = x.softmax(0).unwrap().value();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 5e-6, "{got} vs {want}");
        }

        let c = tape.constant(Tensor::full(&[4], -7.25));
        assert!(c
            .softmax(0)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_rejects_bad_axis_and_nan() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(x.softmax(2), Err(TensorError::AxisOutOfRange { .. })));
        let y = tape.constant(Tensor::new(&[2], vec![1.0, f32::NAN]).unwrap());
        assert!(matches!(y.softmax(0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn softmax_along_first_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[0., 5., 0., 5.]).unwrap());
        let s = x.softmax(0).unwrap().value();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let grads = tape.backward(x.tanh()).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[2], vec![-200.0, 200.0]).unwrap());
        let y = x.sigmoid().value();
        assert_eq!(y.data(), &[0.0, 1.0]);
    }
}
