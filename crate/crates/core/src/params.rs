//! Named parameters, non-trainable buffers and the per-step session that
//! exposes them as tape variables.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    /// Dotted path, unique within a store.
    pub name: String,
    pub value: Tensor<T>,
    /// Embedding row that is held fixed (the padding row).
    pub frozen_row: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    names: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    /// Registers a parameter.
    ///
    /// # Panics
    /// On a duplicate name or a name clashing with a buffer; both indicate
    /// a bug in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter name {name}");
        assert!(
            !self.buffers.iter().any(|(b, _)| *b == name),
            "parameter {name} clashes with a buffer"
        );
        let id = ParamId(self.params.len());
        self.names.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            frozen_row: None,
        });
        id
    }

    pub fn freeze_row(&mut self, id: ParamId, row: usize) {
        self.params[id.0].frozen_row = Some(row);
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(
            !self.names.contains_key(&name) && !self.buffers.iter().any(|(b, _)| *b == name),
            "duplicate buffer name {name}"
        );
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor<T>) {
        debug_assert_eq!(self.buffers[id.0].1.shape(), value.shape());
        self.buffers[id.0].1 = value;
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &str, &Tensor<T>)> {
        self.buffers
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (BufferId(i), n.as_str(), t))
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|(n, _)| n == name).map(BufferId)
    }

    /// Same structure with values converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen_row: p.frozen_row,
                })
                .collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            names: self.names.clone(),
        }
    }
}

/// Weight initialisers.
pub mod init {
    use super::*;

    /// Uniform Glorot: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-a..a))).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    /// `rows × cols` matrix with orthonormal rows (if `rows ≤ cols`) or
    /// columns, by Gram–Schmidt on Gaussian vectors.
    pub fn orthogonal<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
        let (n, d) = if rows <= cols { (rows, cols) } else { (cols, rows) };
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        while basis.len() < n {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let mut data = vec![T::zero(); rows * cols];
        for (i, b) in basis.iter().enumerate() {
            for (j, &x) in b.iter().enumerate() {
                let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
                data[r * cols + c] = T::from_f64_lossy(x);
            }
        }
        Tensor::new(&[rows, cols], data).expect("shape matches data")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers; running averages updated.
    Train,
    /// Running statistics; no buffer updates.
    Eval,
}

/// One forward/backward pass over a [`ParamStore`].
pub struct Session<'t, 's, T: Scalar> {
    pub tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    leaves: RefCell<Vec<Option<Var<'t, T>>>>,
    mode: Mode,
    track_grads: bool,
    updates: RefCell<Vec<(BufferId, Tensor<T>)>>,
}

impl<'t, 's, T: Scalar> Session<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            leaves: RefCell::new(vec![None; store.len()]),
            mode,
            track_grads,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Leaf for a parameter; created on first use so unused parameters
    /// never appear on the tape.
    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        let mut leaves = self.leaves.borrow_mut();
        *leaves[id.0].get_or_insert_with(|| self.tape.leaf(self.store.get(id).value.clone(), self.track_grads))
    }

    pub fn buffer(&self, id: BufferId) -> &'s Tensor<T> {
        self.store.buffer(id)
    }

    /// Queues a buffer write applied by [`Session::finish`]'s caller.
    pub fn update_buffer(&self, id: BufferId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Gradients per parameter (absent for parameters not on the path to
    /// the loss) and pending buffer writes.
    pub fn finish(self, mut grads: Gradients<T>) -> (Vec<Option<Tensor<T>>>, Vec<(BufferId, Tensor<T>)>) {
        let leaves = self.leaves.into_inner();
        let per_param = leaves
            .into_iter()
            .map(|leaf| leaf.and_then(|v| grads.take_node(v.id)))
            .collect();
        (per_param, self.updates.into_inner())
    }

    pub fn buffer_updates(self) -> Vec<(BufferId, Tensor<T>)> {
        self.updates.into_inner()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(4usize, 4usize), (3, 7), (7, 3)] {
            let q: Tensor<f64> = init::orthogonal(&mut rng, r, c);
            let (n, along_rows) = if r <= c { (r, true) } else { (c, false) };
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = if along_rows {
                        (0..c).map(|k| q.get(&[i, k]) * q.get(&[j, k])).sum()
                    } else {
                        (0..r).map(|k| q.get(&[k, i]) * q.get(&[k, j])).sum()
                    };
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = init::glorot_uniform(&mut rng, &[30, 20], 30, 20);
        let a = (6.0f64 / 50.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[1]));
        s.add("a.w", Tensor::zeros(&[1]));
    }

    #[test]
    fn session_collects_only_used_parameters() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let _b = s.add("b", Tensor::zeros(&[3]));
        let tape = Tape::new();
        let sess = Session::new(&tape, &s, Mode::Train, true);
        let loss = sess.param(a).square().sum_all();
        let grads = tape.backward(loss).unwrap();
        let (g, _) = sess.finish(grads);
        assert_eq!(g[0].as_ref().unwrap().data(), &[2.0, 4.0]);
        assert!(g[1].is_none());
    }
}
