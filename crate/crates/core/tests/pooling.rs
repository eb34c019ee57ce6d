use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sri_core::pooling::{fixed_pool, modal_attention_fuse, self_attention_pool, statistics_pool, PoolingKind, STD_EPS};
use sri_core::{Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

/// `(B, T, D)` map whose first `t` steps equal `h` and whose remaining
/// steps are garbage.
fn extend(h: &Tensor<f64>, extra: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (b, t, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let mut out = Vec::with_capacity(b * (t + extra) * d);
    for row in h.data().chunks(t * d) {
        out.extend_from_slice(row);
        out.extend((0..extra * d).map(|_| rng.random_range(-50.0..50.0)));
    }
    Tensor::new(&[b, t + extra, d], out).unwrap()
}

fn lengths(rng: &mut ChaCha8Rng, b: usize, t: usize, min: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(min.min(t)..=t)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attention_weights_are_distributions(b in 1usize..5, t in 1usize..12, d in 1usize..6, m in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f64>::new();
        let lens = lengths(&mut rng, b, t, 1);
        let h = tape.constant(random(&mut rng, &[b, t, d]));
        let w = tape.constant(random(&mut rng, &[d]));
        let (_, alpha) = self_attention_pool(h, w, &lens).unwrap();
        let alpha = alpha.value();
        for (row, &l) in alpha.data().chunks(t).zip(&lens) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row[l..].iter().all(|&a| a == 0.0));
            prop_assert!(row[..l].iter().all(|&a| a > 0.0));
        }

        let dt = d + 1;
        let text_lens = lengths(&mut rng, b, m, 1);
        let ht = tape.constant(random(&mut rng, &[b, m, dt]));
        let wa = tape.constant(random(&mut rng, &[d, dt]));
        let wb = tape.constant(random(&mut rng, &[3, d + dt]));
        let (f, alpha) = modal_attention_fuse(h, ht, &text_lens, wa, wb).unwrap();
        prop_assert_eq!(f.shape(), vec![b, t, 3]);
        let alpha = alpha.value();
        prop_assert_eq!(alpha.shape(), &[b, t, m]);
        for (i, row) in alpha.data().chunks(m).enumerate() {
            let l = text_lens[i / t];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row[l..].iter().all(|&a| a == 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn padding_never_reaches_the_output(b in 1usize..4, t in 2usize..8, d in 1usize..5, extra in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f64>::new();
        let lens = lengths(&mut rng, b, t, 2);
        let short = random(&mut rng, &[b, t, d]);
        let long = extend(&short, extra, &mut rng);
        let (hs, hl) = (tape.constant(short.clone()), tape.constant(long.clone()));
        let w = tape.constant(random(&mut rng, &[d]));
        let close = |a: Tensor<f64>, b: Tensor<f64>| a.max_abs_diff(&b) <= 1e-5;

        let (es, _) = self_attention_pool(hs, w, &lens).unwrap();
        let (el, _) = self_attention_pool(hl, w, &lens).unwrap();
        prop_assert!(close(es.value(), el.value()));
        prop_assert!(close(statistics_pool(hs, &lens).unwrap().value(), statistics_pool(hl, &lens).unwrap().value()));
        for kind in [PoolingKind::Average, PoolingKind::Sum] {
            prop_assert!(close(fixed_pool(hs, &lens, kind).unwrap().value(), fixed_pool(hl, &lens, kind).unwrap().value()));
        }

        // text padding is invisible to every speech step
        let m = rng.random_range(1..6);
        let text_lens = lengths(&mut rng, b, m, 1);
        let ht = random(&mut rng, &[b, m, 2]);
        let ht_long = extend(&ht, extra, &mut rng);
        let wa = tape.constant(random(&mut rng, &[d, 2]));
        let wb = tape.constant(random(&mut rng, &[4, d + 2]));
        let (fs, _) = modal_attention_fuse(hs, tape.constant(ht), &text_lens, wa, wb).unwrap();
        let (fl, _) = modal_attention_fuse(hs, tape.constant(ht_long), &text_lens, wa, wb).unwrap();
        prop_assert!(close(fs.value(), fl.value()));
    }

    #[test]
    fn pooled_width_is_independent_of_length(t in 2usize..20, d in 1usize..6) {
        let tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::ones(&[1, t, d]));
        let w = tape.constant(Tensor::ones(&[d]));
        prop_assert_eq!(self_attention_pool(h, w, &[t]).unwrap().0.shape(), vec![1, PoolingKind::SelfAttention.output_dim(d)]);
        prop_assert_eq!(statistics_pool(h, &[t]).unwrap().shape(), vec![1, PoolingKind::Statistics.output_dim(d)]);
        prop_assert_eq!(fixed_pool(h, &[t], PoolingKind::Sum).unwrap().shape(), vec![1, PoolingKind::Sum.output_dim(d)]);
    }
}

#[test]
fn statistics_match_a_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t, d) = (5, 7);
    let h = random(&mut rng, &[1, t, d]);
    let tape = Tape::<f64>::new();
    let got = statistics_pool(tape.constant(h.clone()), &[t]).unwrap().value();
    for c in 0..d {
        let col: Vec<f64> = (0..t).map(|i| h.get(&[0, i, c])).collect();
        let mean = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        assert!((got.get(&[0, c]) - mean).abs() < 1e-6);
        assert!((got.get(&[0, d + c]) - (var + STD_EPS).sqrt()).abs() < 1e-6);
    }
}

#[test]
fn worked_examples() {
    let tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::from_f64(&[1, 2, 2], &[1., 0., 2., -1.]).unwrap());
    let w = tape.constant(Tensor::from_f64(&[2], &[1., 0.]).unwrap());
    let (e, alpha) = self_attention_pool(h, w, &[2]).unwrap();
    let (a, e) = (alpha.value(), e.value());
    assert!((a.data()[0] - 0.44957).abs() < 1e-5 && (a.data()[1] - 0.55043).abs() < 1e-5);
    assert!((e.data()[0] - 0.91386).abs() < 1e-5 && (e.data()[1] + 0.50085).abs() < 1e-5);

    let hs = tape.constant(Tensor::from_f64(&[1, 1, 2], &[1., 0.]).unwrap());
    let ht = tape.constant(Tensor::from_f64(&[1, 2, 2], &[1., 0., 0., 1.]).unwrap());
    let (_, alpha) = modal_attention_fuse(hs, ht, &[2], tape.constant(Tensor::eye(2)), tape.constant(Tensor::zeros(&[2, 4]))).unwrap();
    let a = alpha.value();
    assert!((a.data()[0] - 0.73106).abs() < 1e-5 && (a.data()[1] - 0.26894).abs() < 1e-5);
}
