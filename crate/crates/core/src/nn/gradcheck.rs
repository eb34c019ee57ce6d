//! End-to-end gradient checks of whole models on small random batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::speech::{FeatureInput, WaveInput};
use super::text::TextInput;
use super::{Batch, ModelError, ModelGraph, ModelKind};
use crate::autodiff::gradcheck::{relative_error, GradCheckReport, FD_STEP};
use crate::autodiff::Tape;
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

/// Required agreement for whole models.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// A step straddling a ReLU or max-pool kink makes the one-sided slopes
/// disagree by twice the error it puts into the central difference, so a
/// step is used only when they agree within a quarter of the tolerance.
/// Coordinates where no step qualifies are skipped.
const ONE_SIDED_AGREEMENT: f64 = MODEL_TOLERANCE / 4.0;
const STEPS: [f64; 3] = [FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub kind: ModelKind,
    pub mode: Mode,
    pub report: GradCheckReport,
    /// Sampled coordinates dropped as kink crossings.
    pub skipped: usize,
}

/// Random inputs for every modality `kind` consumes, with ragged lengths.
pub fn random_batch(model: &ModelGraph<f64>, size: usize, rng: &mut impl Rng) -> Result<Batch<f64>, ModelError> {
    let kind = model.kind;
    let mut batch = Batch::default();
    if kind.uses_text() {
        let len = 6;
        let lengths: Vec<usize> = (0..size).map(|i| if i == 0 { len } else { rng.random_range(2..=len) }).collect();
        let ids = (0..size * len)
            .map(|k| if k % len < lengths[k / len] { rng.random_range(2..model.config.vocab_size) } else { 0 })
            .collect();
        batch.text = Some(TextInput::new(ids, size, len, lengths)?);
    }
    if kind.uses_features() {
        let min = model.min_frames();
        let frames = min + 8;
        let dim = model.config.feature_dim;
        let lengths: Vec<usize> = (0..size).map(|i| if i == 0 { frames } else { rng.random_range(min..=frames) }).collect();
        let mut values = vec![0.0; size * frames * dim];
        for (b, &l) in lengths.iter().enumerate() {
            for v in &mut values[b * frames * dim..(b * frames + l) * dim] {
                *v = rng.random_range(-1.5..1.5);
            }
        }
        batch.features = Some(FeatureInput {
            values: Tensor::new(&[size, frames, dim], values)?,
            lengths,
        });
    }
    if kind.uses_waveform() {
        let min = model.min_samples();
        let samples = min + 3 * model.config.sinc_stride;
        let lengths: Vec<usize> = (0..size).map(|i| if i == 0 { samples } else { rng.random_range(min..=samples) }).collect();
        let mut values = vec![0.0; size * samples];
        for (b, &l) in lengths.iter().enumerate() {
            for v in &mut values[b * samples..b * samples + l] {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        batch.waves = Some(WaveInput {
            samples: Tensor::new(&[size, samples], values)?,
            lengths,
        });
    }
    Ok(batch)
}

fn loss(model: &ModelGraph<f64>, store: &ParamStore<f64>, batch: &Batch<f64>, labels: &[usize], mode: Mode) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let s = Session::new(&tape, store, mode, false);
    Ok(model.forward(&s, batch)?.cross_entropy(labels, None)?.value().item())
}

/// Compares backward gradients of the cross-entropy loss against central
/// differences at up to `per_param` sampled entries of every parameter.
pub fn check_model(
    model: &ModelGraph<f64>,
    batch: &Batch<f64>,
    labels: &[usize],
    mode: Mode,
    per_param: usize,
    seed: u64,
) -> Result<ModelGradCheck, ModelError> {
    let tape = Tape::new();
    let s = Session::new(&tape, &model.store, mode, true);
    let l = model.forward(&s, batch)?.cross_entropy(labels, None)?;
    let grads = tape.backward(l)?;
    let (analytic, _) = s.finish(grads);
    let base = l.value().item();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut skipped = 0;
    let mut store = model.store.clone();
    for ((id, param), grad) in model.store.iter().zip(&analytic) {
        let n = param.value.numel();
        let row_len = n / param.value.shape().first().copied().unwrap_or(1).max(1);
        for _ in 0..per_param.min(n) {
            let i = rng.random_range(0..n);
            // a frozen row is held fixed by contract and never trained
            if param.frozen_row == Some(i / row_len) {
                continue;
            }
            let a = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            let original = store.value_mut(id).data()[i];
            let mut numeric = None;
            for h in STEPS {
                store.value_mut(id).data_mut()[i] = original + h;
                let plus = loss(model, &store, batch, labels, mode)?;
                store.value_mut(id).data_mut()[i] = original - h;
                let minus = loss(model, &store, batch, labels, mode)?;
                store.value_mut(id).data_mut()[i] = original;
                if relative_error((plus - base) / h, (base - minus) / h) <= ONE_SIDED_AGREEMENT {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
            }
            match numeric {
                Some(num) => pairs.push((a, num)),
                None => skipped += 1,
            }
        }
    }
    Ok(ModelGradCheck {
        kind: model.kind,
        mode,
        report: GradCheckReport::from_pairs(pairs, MODEL_TOLERANCE),
        skipped,
    })
}

/// Eval mode at batch 2 and train mode (batch statistics) at batch 3.
pub fn check_kind(model: &ModelGraph<f64>, per_param: usize, seed: u64) -> Result<[ModelGradCheck; 2], ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval_batch = random_batch(model, 2, &mut rng)?;
    let train_batch = random_batch(model, 3, &mut rng)?;
    Ok([
        check_model(model, &eval_batch, &[0, 1], Mode::Eval, per_param, seed)?,
        check_model(model, &train_batch, &[1, 0, 1], Mode::Train, per_param, seed + 1)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    #[test]
    fn every_kind_matches_finite_differences() {
        for kind in ModelKind::ALL {
            let model = ModelGraph::<f64>::new(kind, ModelConfig::tiny(12), 5).unwrap();
            for check in check_kind(&model, 3, 11).unwrap() {
                assert!(check.report.passed, "{kind} {:?}: {:?}", check.mode, check.report);
                assert!(check.report.checked > 4 * check.skipped, "{kind}: too many kink skips");
            }
        }
    }
}
