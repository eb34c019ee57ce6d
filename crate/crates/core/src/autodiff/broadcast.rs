//! Elementwise binary primitives with numpy-style broadcasting.

use super::tape::{BinaryKind, GradStore, Node, Op, Var};
use super::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Output shape plus per-operand strides aligned to the output rank
/// (stride 0 on broadcast axes).
struct Plan {
    out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Plan, TensorError> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
    }
    let strides_for = |p: &[usize]| {
        let cs = contiguous_strides(p);
        p.iter()
            .zip(cs)
            .zip(&out)
            .map(|((&d, s), &o)| if d == o { s } else { 0 })
            .collect::<Vec<_>>()
    };
    Ok(Plan {
        a_strides: strides_for(&pa),
        b_strides: strides_for(&pb),
        out,
    })
}

impl Plan {
    /// Visits each innermost run as `(out_start, a_start, b_start)`; within
    /// a run the operands advance by [`Plan::inner_strides`].
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let inner = self.out[rank - 1];
        let outer = numel(&self.out) / inner;
        let mut idx = vec![0usize; rank - 1];
        let (mut base_a, mut base_b) = (0usize, 0usize);
        for r in 0..outer {
            f(r * inner, base_a, base_b);
            // advance the outer multi-index
            for ax in (0..rank - 1).rev() {
                idx[ax] += 1;
                base_a += self.a_strides[ax];
                base_b += self.b_strides[ax];
                if idx[ax] < self.out[ax] {
                    break;
                }
                base_a -= self.a_strides[ax] * self.out[ax];
                base_b -= self.b_strides[ax] * self.out[ax];
                idx[ax] = 0;
            }
        }
    }

    /// `(run length, a stride, b stride)` along the last axis.
    fn inner_strides(&self) -> (usize, usize, usize) {
        match self.out.len() {
            0 => (1, 0, 0),
            r => (self.out[r - 1], self.a_strides[r - 1], self.b_strides[r - 1]),
        }
    }

    fn map<T: Scalar>(&self, xa: &[T], xb: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = vec![T::zero(); numel(&self.out)];
        let (n, sa, sb) = self.inner_strides();
        self.for_each_run(|o, ia, ib| {
            for (j, v) in out[o..o + n].iter_mut().enumerate() {
                *v = f(xa[ia + j * sa], xb[ib + j * sb]);
            }
        });
        out
    }

    /// Accumulates `f(g, a, b)` into the slot of operand `a` (`to_a`) or `b`.
    fn reduce<T: Scalar>(&self, g: &[T], xa: &[T], xb: &[T], to_a: bool, f: impl Fn(T, T, T) -> T) -> Vec<T> {
        let mut acc = vec![T::zero(); if to_a { xa.len() } else { xb.len() }];
        let (n, sa, sb) = self.inner_strides();
        self.for_each_run(|o, ia, ib| {
            for j in 0..n {
                let (pa, pb) = (ia + j * sa, ib + j * sb);
                acc[if to_a { pa } else { pb }] += f(g[o + j], xa[pa], xb[pb]);
            }
        });
        acc
    }
}

fn apply<T: Scalar>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

fn binary<'t, T: Scalar>(
    kind: BinaryKind,
    op: &'static str,
    a: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    a.check_same_tape(&b);
    let (va, vb) = (a.value(), b.value());
    let (da, db) = (va.data(), vb.data());
    let out = if va.shape() == vb.shape() {
        let data = da.iter().zip(db).map(|(&x, &y)| apply(kind, x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    } else {
        let p = plan(op, va.shape(), vb.shape())?;
        let data = match kind {
            BinaryKind::Add => p.map(da, db, |x, y| x + y),
            BinaryKind::Sub => p.map(da, db, |x, y| x - y),
            BinaryKind::Mul => p.map(da, db, |x, y| x * y),
            BinaryKind::Div => p.map(da, db, |x, y| x / y),
        };
        Tensor::from_parts(p.out, data)
    };
    let rg = a.tape.requires(&[a.id, b.id]);
    Ok(a.tape.push(out, Op::Binary { kind, a: a.id, b: b.id }, rg))
}

// fallible, so these cannot be the std operator traits
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        binary(BinaryKind::Add, "add", self, rhs)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        binary(BinaryKind::Sub, "sub", self, rhs)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        binary(BinaryKind::Mul, "mul", self, rhs)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        binary(BinaryKind::Div, "div", self, rhs)
    }

    /// Adds a constant tensor (broadcast), e.g. an additive attention mask.
    pub fn add_const(self, c: Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let c = self.tape.constant(c);
        self.add(c)
    }

    /// Multiplies by a constant tensor (broadcast), e.g. a 0/1 step mask.
    pub fn mul_const(self, c: Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let c = self.tape.constant(c);
        self.mul(c)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: usize,
    b: usize,
    out: usize,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
    want_a: bool,
    want_b: bool,
) {
    let (va, vb) = (&nodes[a].value, &nodes[b].value);
    let (xa, xb) = (va.data(), vb.data());
    // d(out)/da and d(out)/db given upstream gradient and operands
    let fa = |gi: T, _x: T, y: T| match kind {
        BinaryKind::Add | BinaryKind::Sub => gi,
        BinaryKind::Mul => gi * y,
        BinaryKind::Div => gi / y,
    };
    let fb = |gi: T, x: T, y: T| match kind {
        BinaryKind::Add => gi,
        BinaryKind::Sub => -gi,
        BinaryKind::Mul => gi * x,
        BinaryKind::Div => -gi * x / (y * y),
    };
    if va.shape() == vb.shape() {
        if want_a {
            let ga = g.iter().zip(xa).zip(xb).map(|((&gi, &x), &y)| fa(gi, x, y)).collect();
            store.add(a, ga);
        }
        if want_b {
            let gb = g.iter().zip(xa).zip(xb).map(|((&gi, &x), &y)| fb(gi, x, y)).collect();
            store.add(b, gb);
        }
        return;
    }
    let p = plan("broadcast", va.shape(), vb.shape()).expect("validated in forward");
    debug_assert_eq!(p.out.as_slice(), nodes[out].value.shape());
    if want_a {
        let ga = match kind {
            BinaryKind::Add | BinaryKind::Sub => p.reduce(g, xa, xb, true, |gi, _, _| gi),
            BinaryKind::Mul => p.reduce(g, xa, xb, true, |gi, _, y| gi * y),
            BinaryKind::Div => p.reduce(g, xa, xb, true, |gi, _, y| gi / y),
        };
        store.add(a, ga);
    }
    if want_b {
        let gb = match kind {
            BinaryKind::Add => p.reduce(g, xa, xb, false, |gi, _, _| gi),
            BinaryKind::Sub => p.reduce(g, xa, xb, false, |gi, _, _| -gi),
            BinaryKind::Mul => p.reduce(g, xa, xb, false, |gi, x, _| gi * x),
            BinaryKind::Div => p.reduce(g, xa, xb, false, |gi, x, y| -gi * x / (y * y)),
        };
        store.add(b, gb);
    }
}
