use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sri_core::autodiff::SincSpec;
use sri_core::nn::{ModelConfig, ModelGraph, ModelKind};
use sri_core::params::ParamStore;
use sri_core::pooling::PoolingKind;
use sri_core::text::Vocabulary;
use sri_core::train::{evaluate, inverse_frequency_weights, train, Adam, Dataset, Example, Frontend, TrainConfig};
use sri_core::{Tape, Tensor};

const VOCAB: usize = 12;

/// Token 2 marks a pilot, token 3 a controller; the rest is filler.
fn toy_corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let label = i % 2;
            let len = rng.random_range(3..9);
            let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(4..VOCAB)).collect();
            let at = rng.random_range(0..len);
            ids[at] = 2 + (1 - label);
            Example {
                text: Some(ids),
                features: None,
                wave: None,
                label,
            }
        })
        .collect();
    Dataset { examples }
}

fn small_bilstm(seed: u64) -> ModelGraph<f32> {
    let cfg = ModelConfig {
        embed_dim: 16,
        lstm_hidden: 16,
        classifier_hidden: 16,
        ..ModelConfig::tiny(VOCAB)
    };
    ModelGraph::new(ModelKind::Bilstm, cfg, seed).unwrap()
}

#[test]
fn bilstm_learns_a_separable_toy_corpus() {
    let (train_set, dev_set) = (toy_corpus(200, 1), toy_corpus(100, 2));
    let mut model = small_bilstm(0);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 10,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &train_set, &dev_set, &cfg, |_| {}).unwrap();
    assert!(outcome.history.len() <= 10);
    let dev = evaluate(&model, &dev_set, 0.5, 32).unwrap();
    assert!(dev.acc >= 0.95, "dev acc {}", dev.acc);
    assert_eq!(dev.acc, outcome.best_dev_acc);
}

#[test]
fn same_seed_reproduces_the_first_epoch() {
    let (train_set, dev_set) = (toy_corpus(64, 3), toy_corpus(16, 4));
    let cfg = TrainConfig {
        max_epochs: 1,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = small_bilstm(5);
        let out = train(&mut model, &train_set, &dev_set, &cfg, |_| {}).unwrap();
        (out.history[0].train_loss.to_bits(), model.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    for ((_, p), (_, q)) in sa.iter().zip(sb.iter()) {
        assert_eq!(p.value, q.value);
    }
    let mut other = small_bilstm(5);
    let shuffled = train(&mut other, &train_set, &dev_set, &TrainConfig { seed: 10, ..cfg }, |_| {}).unwrap();
    assert_ne!(shuffled.history[0].train_loss.to_bits(), a);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w".to_string(), Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
    let mut opt = Adam::new(&store, 0.1);
    let g = Tensor::from_f64(&[3], &[3.0, -0.25, 0.0]).unwrap();
    opt.step(&mut store, &[Some(g.clone())]);
    let got = store.value_mut(id).data().to_vec();
    for ((w, w0), gi) in got.iter().zip([1.0, -2.0, 0.5]).zip(g.data()) {
        assert!((w - (w0 - 0.1 * gi / (gi.abs() + 1e-8))).abs() < 1e-12);
    }
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w".to_string(), Tensor::from_f64(&[2], &[3.0, -4.0]).unwrap());
    let mut opt = Adam::new(&store, 0.05);
    for _ in 0..2000 {
        let w = store.value_mut(id).clone();
        let g = w.map(|v| 2.0 * (v - 1.0));
        opt.step(&mut store, &[Some(g)]);
    }
    assert!(store.value_mut(id).data().iter().all(|v| (v - 1.0).abs() < 1e-3));
}

#[test]
fn class_weights_balance_the_classes() {
    let labels = [0, 1, 1, 1];
    let w = inverse_frequency_weights(&labels, 2);
    assert_eq!(w, vec![2.0, 4.0 / 6.0]);
    let per_class: Vec<f64> = (0..2).map(|c| w[c] * labels.iter().filter(|&&l| l == c).count() as f64).collect();
    assert_eq!(per_class[0], per_class[1]);
}

#[test]
fn bad_training_configs_are_rejected() {
    let data = toy_corpus(8, 0);
    let mut model = small_bilstm(0);
    let lr = TrainConfig {
        learning_rate: -1.0,
        ..TrainConfig::default()
    };
    assert!(train(&mut model, &data, &data, &lr, |_| {}).is_err());
    assert!(train(&mut model, &Dataset::default(), &data, &TrainConfig::default(), |_| {}).is_err());
}

#[test]
fn short_transcripts_are_extended_for_statistics_pooling() {
    let cfg = ModelConfig {
        pooling: Some(PoolingKind::Statistics),
        ..ModelConfig::tiny(VOCAB)
    };
    let model = ModelGraph::<f32>::new(ModelKind::Textcnn, cfg, 0).unwrap();
    assert_eq!(model.min_tokens(), 2);
    let mut frontend = Frontend {
        kind: ModelKind::Textcnn,
        vocab: Some(Vocabulary::build(["roger"], 1).unwrap()),
        norm: None,
        max_text_len: 128,
        min_frames: 1,
        min_samples: 1,
        min_tokens: 1,
    };
    frontend.fit_model(&model);
    let ex = frontend.example(Some("roger"), None, 1).unwrap();
    assert_eq!(ex.text, Some(vec![2, 2]));
    let data = Dataset { examples: vec![ex] };
    assert!(model.predict(&data.batch::<f32>(&[0]).0).is_ok());
}

#[test]
fn sinc_filter_passes_its_band() {
    // raw values realise f1 = 500 Hz and f2 = 1500 Hz
    let spec = SincSpec::new(251, 8000.0);
    let tape = Tape::<f64>::new();
    let low = tape.constant(Tensor::from_f64(&[1], &[500.0 - spec.min_low_hz]).unwrap());
    let band = tape.constant(Tensor::from_f64(&[1], &[1000.0 - spec.min_band_hz]).unwrap());
    let kernel = tape.sinc_kernel(low, band, spec).unwrap().value();
    let magnitude = |hz: f64| {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &g) in kernel.data().iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * hz * n as f64 / 8000.0;
            re += g * phase.cos();
            im += g * phase.sin();
        }
        (re * re + im * im).sqrt()
    };
    assert!(magnitude(1000.0) >= 5.0 * magnitude(3000.0));
    assert!((magnitude(1000.0) - 1.0).abs() < 0.1);
}
