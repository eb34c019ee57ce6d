//! LSTM and GRU layers over `(batch, time, features)` with length masks.
//!
//! Padded steps leave the state untouched (`h ← h + m·(h_new − h)`), so a
//! reverse-direction pass starts from the zero state at each sequence's
//! own last valid step.

use rand::Rng;

use super::layers::Linear;
use crate::autodiff::{TensorError, Var};
use crate::params::{init, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Column `t` of a `(batch, time)` mask as `(batch, 1)`, or `None` when
/// every sequence is still valid there.
fn step_mask<T: Scalar>(mask: &Tensor<T>, t: usize) -> Option<Tensor<T>> {
    let (b, len) = (mask.shape()[0], mask.shape()[1]);
    let col: Vec<T> = (0..b).map(|i| mask.data()[i * len + t]).collect();
    if col.iter().all(|&v| v == T::one()) {
        None
    } else {
        Some(Tensor::new(&[b, 1], col).expect("mask column"))
    }
}

fn carry<'t, T: Scalar>(prev: Var<'t, T>, new: Var<'t, T>, m: &Option<Tensor<T>>) -> Result<Var<'t, T>, TensorError> {
    match m {
        None => Ok(new),
        Some(m) => prev.add(new.sub(prev)?.mul_const(m.clone())?),
    }
}

fn time_order(len: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    }
}

#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub input: Linear,
    pub recurrent: ParamId,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmDirection {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, inputs: usize, hidden: usize, reverse: bool) -> Self {
        let input = Linear::new(store, rng, &format!("{name}.input"), inputs, 4 * hidden, true);
        // one orthogonal block per gate
        let mut w = Vec::with_capacity(hidden * 4 * hidden);
        let blocks: Vec<Tensor<T>> = (0..4).map(|_| init::orthogonal(rng, hidden, hidden)).collect();
        for r in 0..hidden {
            for b in &blocks {
                w.extend_from_slice(&b.data()[r * hidden..(r + 1) * hidden]);
            }
        }
        let recurrent = store.add(
            format!("{name}.recurrent"),
            Tensor::new(&[hidden, 4 * hidden], w).expect("recurrent shape"),
        );
        Self {
            input,
            recurrent,
            hidden,
            reverse,
        }
    }

    /// `(B, T, in)` → `(B, T, hidden)`.
    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, x: Var<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        let (b, len, hd) = (shape[0], shape[1], self.hidden);
        let proj = self.input.forward(s, x.transpose(0, 1)?)?;
        let w_hh = s.param(self.recurrent);
        let mut h = s.tape.constant(Tensor::zeros(&[b, hd]));
        let mut c = h;
        let mut outputs = vec![None; len];
        for t in time_order(len, self.reverse) {
            let gates = proj.select(0, t)?.add(h.matmul(w_hh)?)?;
            let i = gates.narrow(1, 0, hd)?.sigmoid();
            let f = gates.narrow(1, hd, hd)?.sigmoid();
            let g = gates.narrow(1, 2 * hd, hd)?.tanh();
            let o = gates.narrow(1, 3 * hd, hd)?.sigmoid();
            let c_new = f.mul(c)?.add(i.mul(g)?)?;
            let h_new = o.mul(c_new.tanh())?;
            let m = step_mask(mask, t);
            c = carry(c, c_new, &m)?;
            h = carry(h, h_new, &m)?;
            outputs[t] = Some(h);
        }
        let outputs: Vec<Var<'t, T>> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        Var::stack(&outputs, 1)
    }
}

/// Stacked bidirectional LSTM; each layer's output concatenates both
/// directions.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(LstmDirection, LstmDirection)>,
}

impl BiLstm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, inputs: usize, hidden: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { inputs } else { 2 * hidden };
                (
                    LstmDirection::new(store, rng, &format!("{name}.l{l}.fwd"), inp, hidden, false),
                    LstmDirection::new(store, rng, &format!("{name}.l{l}.bwd"), inp, hidden, true),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.layers[0].0.hidden
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, mut x: Var<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        for (fwd, bwd) in &self.layers {
            let a = fwd.forward(s, x, mask)?;
            let b = bwd.forward(s, x, mask)?;
            x = Var::concat(&[a, b], 2)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct GruLayer {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, inputs: usize, hidden: usize) -> Self {
        let input = Linear::new(store, rng, &format!("{name}.input"), inputs, 3 * hidden, true);
        let recurrent = Linear::new(store, rng, &format!("{name}.recurrent"), hidden, 3 * hidden, true);
        let mut w = Vec::with_capacity(hidden * 3 * hidden);
        let blocks: Vec<Tensor<T>> = (0..3).map(|_| init::orthogonal(rng, hidden, hidden)).collect();
        for r in 0..hidden {
            for b in &blocks {
                w.extend_from_slice(&b.data()[r * hidden..(r + 1) * hidden]);
            }
        }
        *store.value_mut(recurrent.w) = Tensor::new(&[hidden, 3 * hidden], w).expect("recurrent shape");
        Self { input, recurrent, hidden }
    }

    /// `(B, T, in)` → `(B, T, hidden)`, forward in time.
    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, x: Var<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        let (b, len, hd) = (shape[0], shape[1], self.hidden);
        let proj = self.input.forward(s, x.transpose(0, 1)?)?;
        let mut h = s.tape.constant(Tensor::zeros(&[b, hd]));
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let xp = proj.select(0, t)?;
            let hp = self.recurrent.forward(s, h)?;
            let r = xp.narrow(1, 0, hd)?.add(hp.narrow(1, 0, hd)?)?.sigmoid();
            let z = xp.narrow(1, hd, hd)?.add(hp.narrow(1, hd, hd)?)?.sigmoid();
            let n = xp.narrow(1, 2 * hd, hd)?.add(r.mul(hp.narrow(1, 2 * hd, hd)?)?)?.tanh();
            let h_new = n.add(z.mul(h.sub(n)?)?)?;
            h = carry(h, h_new, &step_mask(mask, t))?;
            outputs.push(h);
        }
        Var::stack(&outputs, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
}

impl Gru {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, inputs: usize, hidden: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| GruLayer::new(store, rng, &format!("{name}.l{l}"), if l == 0 { inputs } else { hidden }, hidden))
            .collect();
        Self { layers }
    }

    pub fn forward<'t, T: Scalar>(&self, s: &Session<'t, '_, T>, mut x: Var<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        for layer in &self.layers {
            x = layer.forward(s, x, mask)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::layers::length_mask;
    use crate::params::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        init::normal(rng, shape, 1.0)
    }

    #[test]
    fn lstm_single_step_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cell = LstmDirection::new(&mut store, &mut rng, "l", 2, 1, false);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, Mode::Eval, false);
        let x = Tensor::from_f64(&[1, 1, 2], &[0.3, -0.7]).unwrap();
        let h = cell.forward(&s, tape.constant(x), &Tensor::ones(&[1, 1])).unwrap().value().item();
        let w = store.get(cell.input.w).value.clone();
        let pre: Vec<f64> = (0..4).map(|g| 0.3 * w.get(&[0, g]) - 0.7 * w.get(&[1, g])).collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = sig(pre[0]) * pre[2].tanh();
        let want = sig(pre[3]) * c.tanh();
        assert!((h - want).abs() < 1e-12);
    }

    #[test]
    fn padding_does_not_change_valid_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let lstm = BiLstm::new(&mut store, &mut rng, "b", 3, 4, 2);
        let gru = Gru::new(&mut store, &mut rng, "g", 3, 4, 2);
        let x = random(&mut rng, &[1, 4, 3]);
        let mut padded = x.data().to_vec();
        padded.extend(random(&mut rng, &[1, 2, 3]).data());
        let padded = Tensor::new(&[1, 6, 3], padded).unwrap();

        let tape = Tape::new();
        let s = Session::new(&tape, &store, Mode::Eval, false);
        for run in 0..2 {
            let (short, long) = if run == 0 {
                (
                    lstm.forward(&s, tape.constant(x.clone()), &length_mask(&[4], 4)).unwrap(),
                    lstm.forward(&s, tape.constant(padded.clone()), &length_mask(&[4], 6)).unwrap(),
                )
            } else {
                (
                    gru.forward(&s, tape.constant(x.clone()), &length_mask(&[4], 4)).unwrap(),
                    gru.forward(&s, tape.constant(padded.clone()), &length_mask(&[4], 6)).unwrap(),
                )
            };
            let d = short.shape()[2];
            let (a, b) = (short.value(), long.value());
            for i in 0..4 * d {
                assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
            }
        }
    }
}
