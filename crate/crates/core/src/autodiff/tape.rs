use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;

use super::conv::{Conv1dGeometry, Conv2dGeometry};
use super::sinc::SincSpec;
use super::{broadcast, conv, elementwise, linalg, loss, norm, shape, sinc, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    /// Natural log of `max(x, floor)`.
    Log(f64),
    Sqrt,
    Square,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormLayout {
    /// Statistics per axis-1 channel over batch and trailing axes.
    Channel,
    /// Statistics per row over the last axis.
    LastAxis,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
        mean: bool,
    },
    SumAll {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        frozen_row: Option<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        geom: Conv1dGeometry,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: Conv2dGeometry,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Normalize {
        x: usize,
        layout: NormLayout,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        p: usize,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
    SincKernel {
        low: usize,
        band: usize,
        spec: SincSpec,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { .. } => "binary",
            Op::Unary { .. } => "unary",
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum_all",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Embedding { .. } => "embedding",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Normalize { .. } => "normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SincKernel { .. } => "sinc_kernel",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Gradient accumulators indexed by node id; buffers are created lazily.
pub(crate) struct GradStore<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradStore<T> {
    /// Zero-initialised accumulator for `id` (created on first use).
    pub fn slot(&mut self, id: usize, len: usize) -> &mut [T] {
        self.slots[id].get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Adds an owned gradient, moving it in when the slot is still empty.
    pub fn add(&mut self, id: usize, g: Vec<T>) {
        match &mut self.slots[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            empty => *empty = Some(g),
        }
    }
}

/// Ordered record of executed primitives.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        let ops: Vec<_> = nodes.iter().map(|n| n.op.name()).collect();
        f.debug_struct("Tape").field("ops", &ops).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&var.id)
    }

    pub(crate) fn take_node(&mut self, id: usize) -> Option<Tensor<T>> {
        self.by_node.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Propagates `d loss / d node` back to every gradient-requiring leaf.
    ///
    /// A tape supports a single backward pass.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut store = GradStore {
            slots: (0..=loss.id).map(|_| None).collect(),
        };
        store.slots[loss.id] = Some(vec![T::one()]);
        let mut by_node = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = store.slots[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    by_node.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                op => backward_op(op, id, &nodes, g, &mut store),
            }
        }
        Ok(Gradients { by_node })
    }
}

fn backward_op<T: Scalar>(
    op: &Op<T>,
    out: usize,
    nodes: &[Node<T>],
    g: Vec<T>,
    store: &mut GradStore<T>,
) {
    let wants = |id: usize| nodes[id].requires_grad;
    match op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::Binary { kind, a, b } => {
            broadcast::binary_backward(*kind, *a, *b, out, nodes, &g, store, wants(*a), wants(*b))
        }
        Op::Unary { kind, x } => elementwise::unary_backward(*kind, *x, out, nodes, g, store),
        Op::Scale { x, factor } => {
            let f = *factor;
            store.add(*x, g.into_iter().map(|v| v * f).collect());
        }
        Op::MatMul { a, b } => linalg::matmul_backward(*a, *b, nodes, &g, store, wants(*a), wants(*b)),
        Op::BatchMatMul { a, b } => {
            linalg::bmm_backward(*a, *b, nodes, &g, store, wants(*a), wants(*b))
        }
        Op::Softmax { x, axis } => elementwise::softmax_backward(*x, *axis, out, nodes, &g, store),
        Op::SumAxis { x, axis, mean } => shape::sum_axis_backward(*x, *axis, *mean, nodes, &g, store),
        Op::SumAll { x } => {
            let n = nodes[*x].value.numel();
            store.add(*x, vec![g[0]; n]);
        }
        Op::Reshape { x } => store.add(*x, g),
        Op::Permute { x, perm } => shape::permute_backward(*x, perm, out, nodes, &g, store),
        Op::Narrow { x, axis, start } => shape::narrow_backward(*x, *axis, *start, out, nodes, &g, store),
        Op::Concat { xs, axis } => shape::concat_backward(xs, *axis, nodes, &g, store),
        Op::Embedding {
            table,
            ids,
            frozen_row,
        } => shape::embedding_backward(*table, ids, *frozen_row, nodes, &g, store),
        Op::Conv1d { x, w, geom } => {
            conv::conv1d_backward(*x, *w, geom, nodes, &g, store, wants(*x), wants(*w))
        }
        Op::Conv2d { x, w, geom } => {
            conv::conv2d_backward(*x, *w, geom, nodes, &g, store, wants(*x), wants(*w))
        }
        Op::MaxPool2d { x, argmax } => {
            let n = nodes[*x].value.numel();
            let slot = store.slot(*x, n);
            for (gi, &src) in g.iter().zip(argmax) {
                slot[src] += *gi;
            }
        }
        Op::Normalize {
            x,
            layout,
            inv_std,
        } => norm::normalize_backward(*x, *layout, inv_std, out, nodes, &g, store),
        Op::CrossEntropy { p, labels, weights } => {
            loss::cross_entropy_backward(*p, labels, weights, nodes, g[0], store)
        }
        Op::SincKernel { low, band, spec } => {
            sinc::sinc_backward(*low, *band, spec, nodes, &g, store, wants(*low), wants(*band))
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Current value (shares storage with the tape).
    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    pub(crate) fn check_same_tape(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }
}
