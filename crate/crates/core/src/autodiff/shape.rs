//! Reductions, layout changes, slicing, concatenation and table lookup.

use super::elementwise::split_axis;
use super::tape::{GradStore, Node, Op, Var};
use super::{invalid, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<(), TensorError> {
    if axis >= rank {
        Err(TensorError::AxisOutOfRange { op, axis, rank })
    } else {
        Ok(())
    }
}

/// Row-major strides.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `data` laid out as `shape` into the axis order given by `perm`.
fn permute_data<T: Copy + Default>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::default(); data.len()];
    if rank == 0 {
        out.copy_from_slice(data);
        return (out, out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer = data.len() / inner;
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut o = 0;
    for _ in 0..outer {
        for j in 0..inner {
            out[o] = data[base + j * inner_stride];
            o += 1;
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn sum_all(self) -> Var<'t, T> {
        let v = self.value();
        let s = v.data().iter().copied().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::SumAll { x: self.id }, rg)
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = T::from_usize(self.value().numel()).expect("element count fits the scalar");
        self.sum_all().scale(T::one() / n)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        check_axis("sum_axis", axis, v.rank())?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        if mean {
            let n = T::from_usize(len).expect("extent fits the scalar");
            out.iter_mut().for_each(|v| *v /= n);
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::SumAxis {
                x: self.id,
                axis,
                mean,
            },
            rg,
        ))
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, dropping it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        self.reduce_axis(axis, true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let v = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Reshape { x: self.id }, rg))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (data, shape) = permute_data(v.data(), v.shape(), perm);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>, TensorError> {
        let rank = self.shape().len();
        check_axis("transpose", a.max(b), rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        check_axis("narrow", axis, v.rank())?;
        let (outer, full, inner) = split_axis(v.shape(), axis);
        if len == 0 || start + len > full {
            return Err(invalid("narrow", format!("range {start}..{} exceeds extent {full}", start + len)));
        }
        let x = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Index `index` along `axis`, dropping the axis.
    pub fn select(self, axis: usize, index: usize) -> Result<Var<'t, T>, TensorError> {
        let mut shape = self.shape();
        let sliced = self.narrow(axis, index, 1)?;
        shape.remove(axis);
        sliced.reshape(&shape)
    }

    /// Concatenation along an existing axis.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Tensor<T>> = parts
            .iter()
            .map(|p| {
                first.check_same_tape(p);
                p.value()
            })
            .collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(Tensor::from_parts(shape, out), Op::Concat { xs: ids, axis }, rg))
    }

    /// Stacks equally shaped inputs along a new axis.
    pub fn stack(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
        let first = parts.first().ok_or_else(|| invalid("stack", "no inputs"))?;
        let mut shape = first.shape();
        if axis > shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "stack",
                axis,
                rank: shape.len() + 1,
            });
        }
        shape.insert(axis, 1);
        let expanded = parts
            .iter()
            .map(|p| p.reshape(&shape))
            .collect::<Result<Vec<_>, _>>()?;
        Var::concat(&expanded, axis)
    }
}

impl<T: Scalar> super::Tape<T> {
    /// Row lookup: `ids` (laid out as `ids_shape`) index rows of the
    /// `(vocab × dim)` table. `frozen_row` never receives gradient.
    pub fn embedding<'t>(
        &'t self,
        table: Var<'t, T>,
        ids: &[usize],
        ids_shape: &[usize],
        frozen_row: Option<usize>,
    ) -> Result<Var<'t, T>, TensorError> {
        let tv = table.value();
        if tv.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "embedding",
                expected: 2,
                shape: tv.shape().to_vec(),
            });
        }
        if numel(ids_shape) != ids.len() {
            return Err(TensorError::LengthMismatch {
                shape: ids_shape.to_vec(),
                len: ids.len(),
            });
        }
        let (rows, dim) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(invalid("embedding", format!("id {bad} outside table of {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * dim..(i + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let rg = table.requires_grad();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
                frozen_row,
            },
            rg,
        ))
    }
}

pub(crate) fn sum_axis_backward<T: Scalar>(
    x: usize,
    axis: usize,
    mean: bool,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
) {
    let shape = nodes[x].value.shape();
    let (outer, len, inner) = split_axis(shape, axis);
    let scale = if mean {
        T::one() / T::from_usize(len).expect("extent fits the scalar")
    } else {
        T::one()
    };
    let slot = store.slot(x, outer * len * inner);
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for k in 0..len {
            let dst = &mut slot[(o * len + k) * inner..(o * len + k + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }
}

pub(crate) fn permute_backward<T: Scalar>(
    x: usize,
    perm: &[usize],
    out: usize,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
) {
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let (data, _) = permute_data(g, nodes[out].value.shape(), &inverse);
    store.add(x, data);
}

pub(crate) fn narrow_backward<T: Scalar>(
    x: usize,
    axis: usize,
    start: usize,
    out: usize,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
) {
    let full_shape = nodes[x].value.shape();
    let (outer, full, inner) = split_axis(full_shape, axis);
    let len = nodes[out].value.shape()[axis];
    let slot = store.slot(x, outer * full * inner);
    for o in 0..outer {
        let dst = &mut slot[(o * full + start) * inner..(o * full + start + len) * inner];
        let src = &g[o * len * inner..(o + 1) * len * inner];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

pub(crate) fn concat_backward<T: Scalar>(
    xs: &[usize],
    axis: usize,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
) {
    let base = nodes[xs[0]].value.shape();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = xs.iter().map(|&i| nodes[i].value.shape()[axis]).sum();
    let mut offset = 0;
    for &id in xs {
        let len = nodes[id].value.shape()[axis];
        if nodes[id].requires_grad {
            let mut part = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * total + offset) * inner;
                part.extend_from_slice(&g[from..from + len * inner]);
            }
            store.add(id, part);
        }
        offset += len;
    }
}

pub(crate) fn embedding_backward<T: Scalar>(
    table: usize,
    ids: &[usize],
    frozen_row: Option<usize>,
    nodes: &[Node<T>],
    g: &[T],
    store: &mut GradStore<T>,
) {
    let tv = &nodes[table].value;
    let dim = tv.shape()[1];
    let slot = store.slot(table, tv.numel());
    for (pos, &row) in ids.iter().enumerate() {
        if Some(row) == frozen_row {
            continue;
        }
        let src = &g[pos * dim..(pos + 1) * dim];
        for (d, &s) in slot[row * dim..(row + 1) * dim].iter_mut().zip(src) {
            *d += s;
        }
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
    fn permute_round_trip() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![2, 2, 3]);
        assert_eq!(p.value().get(&[1, 0, 2]), x.value().get(&[0, 2, 1]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value(), x.value());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_concat_and_stack() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 2).unwrap();
        assert_eq!(b.value().data(), &[2., 3., 5., 6.]);
        let joined = Var::concat(&[b, a], 1).unwrap();
        assert_eq!(joined.value().data(), &[2., 3., 1., 5., 6., 4.]);
        let s = Var::stack(&[a, a], 0).unwrap();
        assert_eq!(s.shape(), vec![2, 2, 1]);
        let loss = joined.mul(joined).unwrap().sum_all();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4., 6., 8., 10., 12.]);
        assert!(x.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn reductions() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[5., 7., 9.]);
        assert_eq!(x.mean_axis(1).unwrap().value().data(), &[2., 5.]);
        let loss = x.mean_axis(1).unwrap().sum_all();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| (g - 1. / 3.).abs() < 1e-15));
    }

    #[test]
    fn embedding_skips_frozen_row() {
        let tape = Tape::<f64>::new();
        let table = tape.leaf(t(&[3, 2], &[0., 0., 1., 2., 3., 4.]), true);
        let e = tape.embedding(table, &[2, 0, 2], &[1, 3], Some(0)).unwrap();
        assert_eq!(e.shape(), vec![1, 3, 2]);
        assert_eq!(e.value().data(), &[3., 4., 0., 0., 3., 4.]);
        let grads = tape.backward(e.sum_all()).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[0., 0., 0., 0., 2., 2.]);
        assert!(tape_embedding_out_of_range());
    }

    fn tape_embedding_out_of_range() -> bool {
        let tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(&[2, 2]));
        tape.embedding(table, &[5], &[1], None).is_err()
    }
}
