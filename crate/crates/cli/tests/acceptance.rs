//! Acceptance run, one PASS/FAIL line per criterion. Numeric arguments
//! select a subset, e.g. `cargo test --test acceptance -- 1 2 3`.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sri_cli::checkpoint::{self, Checkpoint, Metadata};
use sri_cli::config::Preset;
use sri_core::audio::FeatureMatrix;
use sri_core::autodiff::suite::{primitive_suite, PRIMITIVE_TOLERANCE};
use sri_core::nn::gradcheck::{check_kind, MODEL_TOLERANCE};
use sri_core::nn::{ModelConfig, ModelGraph, ModelKind};
use sri_core::pooling::{fixed_pool, modal_attention_fuse, self_attention_pool, statistics_pool, PoolingKind};
use sri_core::synth::{generate_corpus, SynthConfig};
use sri_core::train::data::make_batch;
use sri_core::train::{
    compute_auc, evaluate, roc_curve, train, trapezoid_area, ConfusionCounts, Example, Frontend, Manifest,
    MetricsReport, TrainConfig,
};
use sri_core::{Tape, Tensor};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const EQUATION_TOLERANCE: f64 = 1e-6;
const FUZZED_SHAPES: usize = 1000;
const METRIC_TOLERANCE: f64 = 1e-9;
const SCORE_SETS: usize = 100;
const END_TO_END_ACCURACY: f64 = 0.90;
const END_TO_END_EPOCHS: usize = 20;
const END_TO_END_BUDGET: Duration = Duration::from_secs(30 * 60);
const ORDERING_SLACK: f64 = 0.01;
const ORDERING_SEEDS: [u64; 3] = [1, 2, 3];
const PADDING_TOLERANCE: f64 = 1e-5;

/// Desk-scale widths and step size used for every trained run.
const LEARNING_RATE: f64 = 1e-3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst_primitive = 0.0f64;
    let mut failures = Vec::new();
    for c in primitive_suite(0).expect("primitive suite runs") {
        worst_primitive = worst_primitive.max(c.report.max_rel_error);
        if !(c.report.passed && c.report.max_rel_error <= PRIMITIVE_TOLERANCE) {
            failures.push(c.name.to_string());
        }
    }
    let mut worst_model = 0.0f64;
    for kind in ModelKind::ALL {
        let model = ModelGraph::<f64>::new(kind, ModelConfig::tiny(12), 5).expect("tiny model builds");
        for c in check_kind(&model, 3, 11).expect("model check runs") {
            worst_model = worst_model.max(c.report.max_rel_error);
            if !(c.report.passed && c.report.max_rel_error <= MODEL_TOLERANCE) {
                failures.push(format!("{kind} {:?}", c.mode));
            }
        }
    }
    let elapsed = start.elapsed();
    let on_time = elapsed <= GRADCHECK_BUDGET;
    verdict(
        failures.is_empty() && on_time,
        format!(
            "primitives max rel {worst_primitive:.2e} (<= {PRIMITIVE_TOLERANCE:e}), models max rel {worst_model:.2e} (<= {MODEL_TOLERANCE:e}), {:.1}s of {}s{}",
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, values).expect("shape matches")
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

fn equations() -> Verdict {
    let tape = Tape::<f64>::new();
    let mut worst = 0.0f64;
    let mut track = |got: f64, want: f64| worst = worst.max((got - want).abs());

    // attention pooling, by hand: logits tanh(H) w, softmax, tanh(Σ α h)
    let h: [[f64; 2]; 2] = [[1.0, 0.0], [2.0, -1.0]];
    let logits = [h[0][0].tanh(), h[1][0].tanh()];
    let z = logits[0].exp() + logits[1].exp();
    let alpha = [logits[0].exp() / z, logits[1].exp() / z];
    let e = [
        (alpha[0] * h[0][0] + alpha[1] * h[1][0]).tanh(),
        (alpha[0] * h[0][1] + alpha[1] * h[1][1]).tanh(),
    ];
    let (got_e, got_alpha) = self_attention_pool(
        tape.constant(tensor(&[1, 2, 2], &[1., 0., 2., -1.])),
        tape.constant(tensor(&[2], &[1., 0.])),
        &[2],
    )
    .expect("pooling runs");
    for i in 0..2 {
        track(got_alpha.value().data()[i], alpha[i]);
        track(got_e.value().data()[i], e[i]);
    }

    // modal attention, by hand: scores hs·W_a·htᵀ = [1, 0]; W_b = [I | 0]
    // exposes the context so that f = tanh(c)
    let alpha = [1f64.exp() / (1f64.exp() + 1.0), 1.0 / (1f64.exp() + 1.0)];
    let (f, got_alpha) = modal_attention_fuse(
        tape.constant(tensor(&[1, 1, 2], &[1., 0.])),
        tape.constant(tensor(&[1, 2, 2], &[1., 0., 0., 1.])),
        &[2],
        tape.constant(Tensor::eye(2)),
        tape.constant(tensor(&[2, 4], &[1., 0., 0., 0., 0., 1., 0., 0.])),
    )
    .expect("fusion runs");
    for (i, &a) in alpha.iter().enumerate() {
        track(got_alpha.value().data()[i], a);
        track(f.value().data()[i].atanh(), a);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_row = 0.0f64;
    for _ in 0..FUZZED_SHAPES {
        let (b, t, d, m) = (rng.random_range(1..5), rng.random_range(1..12), rng.random_range(1..6), rng.random_range(1..9));
        let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t)).collect();
        let text_lengths: Vec<usize> = (0..b).map(|_| rng.random_range(1..=m)).collect();
        let hs = tape.constant(random(&mut rng, &[b, t, d], 3.0));
        let (_, a) = self_attention_pool(hs, tape.constant(random(&mut rng, &[d], 3.0)), &lengths).expect("pooling runs");
        for row in a.value().data().chunks(t) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let (_, a) = modal_attention_fuse(
            hs,
            tape.constant(random(&mut rng, &[b, m, 3], 3.0)),
            &text_lengths,
            tape.constant(random(&mut rng, &[d, 3], 3.0)),
            tape.constant(random(&mut rng, &[2, d + 3], 3.0)),
        )
        .expect("fusion runs");
        for row in a.value().data().chunks(m) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(
        worst <= EQUATION_TOLERANCE && worst_row <= EQUATION_TOLERANCE,
        format!(
            "worked examples off by {worst:.1e}, attention rows off by {worst_row:.1e} over {FUZZED_SHAPES} shapes (<= {EQUATION_TOLERANCE:e})"
        ),
    )
}

fn pair_count_auc(scores: &[f64], positives: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positives[i] && !positives[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..SCORE_SETS {
        let n = rng.random_range(2..80);
        let mut positives: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        positives[0] = true;
        positives[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..25) as f64) / 24.0).collect();
        let auc = compute_auc(&scores, &positives).expect("two classes");
        let roc = roc_curve(&scores, &positives).expect("two classes");
        worst = worst.max((auc - pair_count_auc(&scores, &positives)).abs());
        worst = worst.max((auc - trapezoid_area(&roc)).abs());
    }
    let mut exact = true;
    for _ in 0..SCORE_SETS {
        let (tp, fp, tn, fn_) = (rng.random_range(1..60), rng.random_range(0..60), rng.random_range(0..60), rng.random_range(0..60));
        let r = MetricsReport::from_counts(ConfusionCounts { tp, fp, tn, fn_ }, None);
        let (p, rc) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64);
        exact &= r.acc == (tp + tn) as f64 / (tp + fp + tn + fn_) as f64;
        exact &= r.precision == p && r.recall == rc && r.f1 == 2.0 * p * rc / (p + rc);
        exact &= (r.f1 - 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64).abs() < 1e-12;
    }
    verdict(
        worst <= METRIC_TOLERANCE && exact,
        format!(
            "AUC vs pair counting and trapezoids off by {worst:.1e} over {SCORE_SETS} sets (<= {METRIC_TOLERANCE:e}); confusion metrics {}",
            if exact { "exact" } else { "MISMATCH" }
        ),
    )
}

/// Trains `kind` on `dir` and returns the test report.
fn train_and_test(kind: ModelKind, pooling: Option<PoolingKind>, dir: &Path, seed: u64) -> (MetricsReport, usize) {
    let read = |name: &str| Manifest::read(&dir.join(name)).expect("manifest reads");
    let (tr, dv, te) = (read("train.jsonl"), read("dev.jsonl"), read("test.jsonl"));
    let mut frontend = Frontend::fit(kind, &tr).expect("frontend fits");
    let cfg = ModelConfig {
        pooling,
        ..ModelConfig::compact(frontend.vocab_size())
    };
    let mut model = ModelGraph::<f32>::new(kind, cfg, seed).expect("model builds");
    frontend.fit_model(&model);
    let (train_set, dev_set, test_set) = (
        frontend.dataset(&tr).expect("train loads"),
        frontend.dataset(&dv).expect("dev loads"),
        frontend.dataset(&te).expect("test loads"),
    );
    let tc = TrainConfig {
        learning_rate: LEARNING_RATE,
        max_epochs: END_TO_END_EPOCHS,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &train_set, &dev_set, &tc, |_| {}).expect("training runs");
    (evaluate(&model, &test_set, 0.5, tc.batch_size).expect("evaluation runs"), outcome.history.len())
}

fn end_to_end() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("temp dir");
    generate_corpus(&SynthConfig::default(), dir.path()).expect("corpus generates");
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [ModelKind::Bilstm, ModelKind::Textcnn, ModelKind::Crnn, ModelKind::Mmsrinet] {
        let (report, epochs) = train_and_test(kind, None, dir.path(), 0);
        pass &= report.acc >= END_TO_END_ACCURACY;
        parts.push(format!("{kind} {:.4} ({epochs} ep)", report.acc));
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= END_TO_END_BUDGET;
    verdict(
        pass,
        format!(
            "test acc {} (>= {END_TO_END_ACCURACY}), {:.0}s of {}s",
            parts.join(", "),
            elapsed.as_secs_f64(),
            END_TO_END_BUDGET.as_secs()
        ),
    )
}

fn ordering() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let stress = SynthConfig {
        n_dev: 400,
        dfg_rate: 0.3,
        channel_swap_rate: 0.2,
        ..SynthConfig::default()
    };
    generate_corpus(&stress, dir.path()).expect("corpus generates");
    let runs: [(&str, ModelKind, Option<PoolingKind>); 4] = [
        ("bilstm", ModelKind::Bilstm, None),
        ("crnn", ModelKind::Crnn, None),
        ("mmsrinet", ModelKind::Mmsrinet, None),
        ("mmsrinet+average", ModelKind::Mmsrinet, Some(PoolingKind::Average)),
    ];
    let mut means = [0.0; 4];
    for (k, (name, kind, pooling)) in runs.iter().enumerate() {
        let accs: Vec<f64> = ORDERING_SEEDS.iter().map(|&s| train_and_test(*kind, *pooling, dir.path(), s).0.acc).collect();
        means[k] = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("    {name:<17} seeds {ORDERING_SEEDS:?} test acc {accs:.4?} mean {:.4}", means[k]);
    }
    let [text, speech, fused, average] = means;
    let fusion_ok = fused >= text.max(speech) - ORDERING_SLACK;
    let pooling_ok = fused >= average;
    verdict(
        fusion_ok && pooling_ok,
        format!(
            "mmsrinet {fused:.4} vs max(bilstm {text:.4}, crnn {speech:.4}) - {ORDERING_SLACK}: {}; self-attention {fused:.4} vs average {average:.4}: {}",
            if fusion_ok { "ok" } else { "violated" },
            if pooling_ok { "ok" } else { "violated" }
        ),
    )
}

fn ragged_examples(model: &ModelGraph<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    let dim = model.config.feature_dim;
    (0..n)
        .map(|i| Example {
            text: model.kind.uses_text().then(|| {
                let len = rng.random_range(model.min_tokens()..10);
                (0..len).map(|_| rng.random_range(2..model.config.vocab_size)).collect()
            }),
            features: model.kind.uses_features().then(|| {
                let frames = model.min_frames() + rng.random_range(0..16);
                FeatureMatrix {
                    frames,
                    channels: dim,
                    values: (0..frames * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                }
            }),
            wave: model.kind.uses_waveform().then(|| {
                let samples = model.min_samples() + rng.random_range(0..5 * model.config.sinc_stride);
                (0..samples).map(|_| rng.random_range(-1.0..1.0)).collect()
            }),
            label: i % 2,
        })
        .collect()
}

fn padding() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for kind in ModelKind::ALL {
        for seed in 0..4 {
            let model = ModelGraph::<f64>::new(kind, ModelConfig::tiny(20), seed).expect("tiny model builds");
            let ex = ragged_examples(&model, 5, &mut rng);
            let all: Vec<&Example> = ex.iter().collect();
            let batched = model.predict(&make_batch(&all)).expect("batch predicts");
            for (i, e) in ex.iter().enumerate() {
                let alone = model.predict(&make_batch(&[e])).expect("single predicts");
                for c in 0..2 {
                    worst = worst.max((alone.data()[c] - batched.data()[2 * i + c]).abs());
                }
            }
        }
    }

    // garbage beyond the valid length never reaches pooled or fused outputs
    let tape = Tape::<f64>::new();
    for _ in 0..200 {
        let (b, t, d, extra) = (rng.random_range(1..4), rng.random_range(2..8), rng.random_range(1..5), rng.random_range(1..6));
        let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(2..=t)).collect();
        let short = random(&mut rng, &[b, t, d], 3.0);
        let mut long = Vec::new();
        for row in short.data().chunks(t * d) {
            long.extend_from_slice(row);
            long.extend((0..extra * d).map(|_| rng.random_range(-50.0..50.0)));
        }
        let (hs, hl) = (tape.constant(short), tape.constant(tensor(&[b, t + extra, d], &long)));
        let w = tape.constant(random(&mut rng, &[d], 2.0));
        let mut compare = |a: Tensor<f64>, b: Tensor<f64>| worst = worst.max(a.max_abs_diff(&b));
        compare(self_attention_pool(hs, w, &lengths).unwrap().0.value(), self_attention_pool(hl, w, &lengths).unwrap().0.value());
        compare(statistics_pool(hs, &lengths).unwrap().value(), statistics_pool(hl, &lengths).unwrap().value());
        for kind in [PoolingKind::Average, PoolingKind::Sum] {
            compare(fixed_pool(hs, &lengths, kind).unwrap().value(), fixed_pool(hl, &lengths, kind).unwrap().value());
        }
        let (wa, wb) = (tape.constant(random(&mut rng, &[d, d], 2.0)), tape.constant(random(&mut rng, &[3, 2 * d], 2.0)));
        let (fs, _) = modal_attention_fuse(hs, hs, &lengths, wa, wb).unwrap();
        let (fl, _) = modal_attention_fuse(hs, hl, &lengths, wa, wb).unwrap();
        compare(fs.value(), fl.value());
    }
    verdict(
        worst <= PADDING_TOLERANCE,
        format!("max perturbation {worst:.1e} over 7 kinds and 200 pooling/fusion maps (<= {PADDING_TOLERANCE:e})"),
    )
}

fn persistence() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let small = SynthConfig {
        n_train: 48,
        n_dev: 16,
        n_test: 16,
        ..SynthConfig::default()
    };
    generate_corpus(&small, dir.path()).expect("corpus generates");
    let read = |name: &str| Manifest::read(&dir.path().join(name)).expect("manifest reads");
    let (tr, dv) = (read("train.jsonl"), read("dev.jsonl"));
    let mut problems = Vec::new();
    for kind in ModelKind::ALL {
        let run = || {
            let mut frontend = Frontend::fit(kind, &tr).expect("frontend fits");
            let mut model = ModelGraph::<f32>::new(kind, Preset::Tiny.model_config(frontend.vocab_size()), 3).expect("model builds");
            frontend.fit_model(&model);
            let (t, d) = (frontend.dataset(&tr).unwrap(), frontend.dataset(&dv).unwrap());
            let tc = TrainConfig {
                max_epochs: 1,
                seed: 3,
                ..TrainConfig::default()
            };
            let out = train(&mut model, &t, &d, &tc, |_| {}).expect("training runs");
            (out.history[0].train_loss, model, frontend, d, tc)
        };
        let (loss_a, model, frontend, dev, tc) = run();
        let (loss_b, ..) = run();
        if loss_a.to_bits() != loss_b.to_bits() {
            problems.push(format!("{kind}: epoch-1 loss {loss_a} vs {loss_b}"));
        }

        let path = dir.path().join(format!("{kind}.ckpt"));
        let ckpt = Checkpoint::from_model(&model, Metadata::new(&model, 3, &frontend, Some(tc)));
        checkpoint::save(&path, &ckpt).expect("checkpoint saves");
        let (loaded, loaded_frontend, meta) = checkpoint::load_model(&path).expect("checkpoint loads");
        let bytes = std::fs::read(&path).expect("checkpoint reads");
        if Checkpoint::from_model(&loaded, meta).to_bytes() != bytes {
            problems.push(format!("{kind}: re-serialised checkpoint differs"));
        }
        let same_tensors = model.store.iter().zip(loaded.store.iter()).all(|((_, a), (_, b))| {
            a.value.shape() == b.value.shape() && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        let reloaded_dev = loaded_frontend.dataset(&dv).expect("dev reloads");
        let order: Vec<usize> = (0..dev.len()).collect();
        let before = model.predict(&dev.batch::<f32>(&order).0).expect("predicts");
        let after = loaded.predict(&reloaded_dev.batch::<f32>(&order).0).expect("predicts");
        let same_outputs = before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !(same_tensors && same_outputs) {
            problems.push(format!("{kind}: reloaded model differs"));
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "all 7 kinds: checkpoint bytes, tensors and outputs bit-exact; same-seed epoch-1 loss bit-exact".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    #[allow(clippy::type_complexity)]
    let criteria: [(usize, &str, fn() -> Verdict); 7] = [
        (1, "gradient correctness", gradients),
        (2, "equation-level oracles", equations),
        (3, "metric oracles", metrics),
        (6, "masking and shape invariants", padding),
        (7, "persistence", persistence),
        (4, "synthetic end-to-end", end_to_end),
        (5, "qualitative ordering on the stress split", ordering),
    ];
    let mut failed = 0;
    let mut ran = Vec::new();
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| verdict(false, "panicked"));
        failed += usize::from(!v.pass);
        let line = format!(
            "criterion {n} {}: {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        ran.push((n, line));
    }
    ran.sort_by_key(|(n, _)| *n);
    println!("\nsummary");
    for (_, line) in &ran {
        println!("  {line}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
