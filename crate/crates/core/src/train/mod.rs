//! Adam training with early stopping, and evaluation.

pub mod data;
pub mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TensorError};
use crate::nn::{ModelError, ModelGraph};
use crate::params::{Mode, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
pub use data::{DataError, Dataset, Example, FeatureNorm, Frontend, Manifest};
pub use metrics::{compute_auc, roc_curve, trapezoid_area, ConfusionCounts, MetricsError, MetricsReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Inverse-frequency class weights in the loss.
    pub class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            seed: 0,
            class_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch_size and max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(self.eps));
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.step));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.step));
        let lr = T::from_f64_lossy(self.lr);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in store.value_mut(id).data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best dev accuracy; the first epoch reaching the maximum wins.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, dev_acc: f64) -> Verdict {
        match self.best {
            Some((_, b)) if dev_acc <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, dev_acc));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
}

/// `N / (classes · N_c)` per class, 0 for absent classes.
pub fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { labels.len() as f64 / (classes * c) as f64 })
        .collect()
}

/// One optimisation step on a batch; returns the batch loss.
fn train_step<T: Scalar>(
    model: &mut ModelGraph<T>,
    opt: &mut Adam<T>,
    data: &Dataset,
    indices: &[usize],
    weights: Option<&[T]>,
) -> Result<f64, TrainError> {
    let (batch, labels) = data.batch::<T>(indices);
    let tape = Tape::new();
    let (grads, updates, loss) = {
        let s = Session::new(&tape, &model.store, Mode::Train, true);
        let probs = model.forward(&s, &batch)?;
        let loss = probs.cross_entropy(&labels, weights)?;
        let value = loss.value().item().as_f64();
        let g = tape.backward(loss)?;
        let (grads, updates) = s.finish(g);
        (grads, updates, value)
    };
    if loss.is_finite() {
        opt.step(&mut model.store, &grads);
        model.apply_buffer_updates(updates);
    }
    Ok(loss)
}

/// Trains in place and leaves `model` at the best-dev-accuracy snapshot.
/// `on_epoch` sees every record as it is produced.
pub fn train<T: Scalar>(
    model: &mut ModelGraph<T>,
    train_set: &Dataset,
    dev_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptySplit("dev"));
    }
    let weights: Option<Vec<T>> = cfg.class_weights.then(|| {
        inverse_frequency_weights(&train_set.labels(), 2)
            .into_iter()
            .map(T::from_f64_lossy)
            .collect()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.store, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = train_step(model, &mut opt, train_set, chunk, weights.as_deref())?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            total += loss;
            batches += 1;
        }
        let dev_acc = evaluate(model, dev_set, 0.5, cfg.batch_size)?.acc;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            dev_acc,
        };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, dev_acc) {
            Verdict::Improved => best_store = model.store.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    model.store = best_store;
    let (best_epoch, best_dev_acc) = stopper.best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_dev_acc,
    })
}

/// Pilot probabilities in dataset order, evaluation mode.
pub fn predict_scores<T: Scalar>(model: &ModelGraph<T>, data: &Dataset, batch_size: usize) -> Result<Vec<f64>, TrainError> {
    let order: Vec<usize> = (0..data.len()).collect();
    let mut scores = Vec::with_capacity(data.len());
    for chunk in order.chunks(batch_size.max(1)) {
        let (batch, _) = data.batch::<T>(chunk);
        let p = model.predict(&batch)?;
        scores.extend(p.data().chunks(2).map(|row| row[1].as_f64()));
    }
    Ok(scores)
}

pub fn evaluate<T: Scalar>(model: &ModelGraph<T>, data: &Dataset, threshold: f64, batch_size: usize) -> Result<MetricsReport, TrainError> {
    let scores = predict_scores(model, data, batch_size)?;
    let positives: Vec<bool> = data.labels().iter().map(|&l| l == 1).collect();
    Ok(MetricsReport::compute(&scores, &positives, threshold)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_one_stops_on_first_drop() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 0.8), Verdict::Improved);
        assert_eq!(s.observe(2, 0.7), Verdict::Stop);
        assert_eq!(s.best, Some((1, 0.8)));
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = EarlyStopping::new(2);
        s.observe(1, 0.5);
        assert_eq!(s.observe(2, 0.5), Verdict::Continue);
        assert_eq!(s.observe(3, 0.6), Verdict::Improved);
        assert_eq!(s.best, Some((3, 0.6)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut opt = Adam::new(&store, 0.1);
        opt.step(&mut store, &[Some(Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap())]);
        let w = store.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn inverse_weights() {
        assert_eq!(inverse_frequency_weights(&[0, 1, 1, 1], 2), vec![2.0, 2.0 / 3.0]);
    }
}
