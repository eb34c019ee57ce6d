//! Dense matrix products.

use super::tape::{GradStore, Node, Op, Var};
use super::TensorError;
use crate::scalar::{gemm_into, Scalar};
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    /// `(m × k) · (k × n) → (m × n)`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.check_same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_into(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let rg = self.tape.requires(&[self.id, rhs.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: rhs.id,
            },
            rg,
        ))
    }

    /// Batched product `(B × m × k) · (B × k × n) → (B × m × n)`.
    pub fn bmm(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.check_same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_into(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.tape.requires(&[self.id, rhs.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul {
                a: self.id,
                b: rhs.id,
            },
            rg,
        ))
    }
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: usize,
    b: usize,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
    want_a: bool,
    want_b: bool,
) {
    let (va, vb) = (&nodes[a].value, &nodes[b].value);
    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
    if want_a {
        // dA = G · Bᵀ
        let slot = store.slot(a, m * k);
        gemm_into(m, n, k, g, false, vb.data(), true, slot, true);
    }
    if want_b {
        // dB = Aᵀ · G
        let slot = store.slot(b, k * n);
        gemm_into(k, m, n, va.data(), true, g, false, slot, true);
    }
}

pub(crate) fn bmm_backward<T: Scalar>(
    a: usize,
    b: usize,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
    want_a: bool,
    want_b: bool,
) {
    let (va, vb) = (&nodes[a].value, &nodes[b].value);
    let (batch, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
    if want_a {
        let slot = store.slot(a, batch * m * k);
        for i in 0..batch {
            gemm_into(
                m,
                n,
                k,
                &g[i * m * n..(i + 1) * m * n],
                false,
                &vb.data()[i * k * n..(i + 1) * k * n],
                true,
                &mut slot[i * m * k..(i + 1) * m * k],
                true,
            );
        }
    }
    if want_b {
        let slot = store.slot(b, batch * k * n);
        for i in 0..batch {
            gemm_into(
                k,
                m,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                true,
                &g[i * m * n..(i + 1) * m * n],
                false,
                &mut slot[i * k * n..(i + 1) * k * n],
                true,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn hand_multiplication() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2, 1], &[5., 6.]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[17., 39.]);
    }

    #[test]
    fn identity_and_zero() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_f64(&[3, 3], &[0.3, -1.2, 2.0, 0.7, 0.1, -0.4, 1.5, 2.5, -3.0]).unwrap();
        let av = tape.constant(a.clone());
        let i = tape.constant(Tensor::eye(3));
        assert_eq!(av.matmul(i).unwrap().value(), a);
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(z.matmul(av).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(b).is_err());
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_b_transpose() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let b = tape.leaf(Tensor::from_f64(&[3, 2], &[0.5, -1., 2., 0., 1., 3.]).unwrap(), true);
        let loss = a.matmul(b).unwrap().sum_all();
        let grads = tape.backward(loss).unwrap();
        // ones(2×2) · Bᵀ: every row equals the row sums of B
        assert_eq!(grads.get(a).unwrap().data(), &[-0.5, 2., 4., -0.5, 2., 4.]);
        // Aᵀ · ones(2×2): every column equals the column sums of A... per row of B
        assert_eq!(grads.get(b).unwrap().data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[2, 1, 2], &[1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2, 2, 1], &[1., 1., 2., 0.]).unwrap());
        assert_eq!(a.bmm(b).unwrap().value().data(), &[3., 6.]);
    }
}
