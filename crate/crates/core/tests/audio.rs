use std::f64::consts::PI;

use proptest::prelude::*;
use sri_core::audio::{
    load_wav, normalize_waveform, write_wav, AudioError, FeatureExtractor, FilterBank, FilterScale, FrameSpec, Waveform,
    ENERGY_FLOOR, SAMPLE_RATE,
};

fn sine(hz: f64, amp: f64, n: usize) -> Waveform {
    Waveform::new((0..n).map(|i| (amp * (2.0 * PI * hz * i as f64 / SAMPLE_RATE as f64).sin()) as f32).collect())
}

/// Direct O(N²) DFT power of one windowed frame.
fn dft_power(samples: &[f32], start: usize, spec: &FrameSpec) -> Vec<f64> {
    let window = spec.window();
    let n = spec.fft_size;
    (0..spec.bins())
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, w) in window.iter().enumerate() {
                let x = samples[start + i] as f64 * w;
                let phase = -2.0 * PI * (k * i) as f64 / n as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            re * re + im * im
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frame_count_and_floor(n in 200usize..3000, seed in prop::collection::vec(-1.0f32..1.0, 64)) {
        let w = Waveform::new(seed.iter().cycle().take(n).copied().collect());
        let ex = FeatureExtractor::standard();
        let m = ex.log_filterbank(&w).unwrap();
        prop_assert_eq!(m.frames, (n - 200) / 80 + 1);
        prop_assert_eq!(m.values.len(), m.frames * 80);
        let floor = ENERGY_FLOOR.ln() as f32;
        prop_assert!(m.values.iter().all(|&v| v.is_finite() && v >= floor));
    }

    #[test]
    fn fft_power_matches_direct_dft(values in prop::collection::vec(-1.0f32..1.0, 280), start in 0usize..80) {
        let ex = FeatureExtractor::standard();
        let fast = ex.power_spectrum(&values, start);
        let slow = dft_power(&values, start, &ex.spec);
        let scale = slow.iter().cloned().fold(1e-12, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn normalised_waveforms_have_zero_mean_and_unit_peak(values in prop::collection::vec(-3.0f32..3.0, 2..400)) {
        let w = normalize_waveform(&Waveform::new(values.clone()));
        prop_assume!(values.iter().any(|&v| (v - values[0]).abs() > 1e-3));
        let mean = w.samples.iter().map(|&s| s as f64).sum::<f64>() / w.samples.len() as f64;
        let peak = w.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((peak - 1.0).abs() < 1e-6);
    }
}

#[test]
fn filterbank_triangles_meet_at_neighbour_centres() {
    let spec = FrameSpec::default();
    for scale in [FilterScale::Linear, FilterScale::Mel] {
        let bank = FilterBank::new(80, &spec, SAMPLE_RATE, scale);
        let bin_hz = SAMPLE_RATE as f64 / spec.fft_size as f64;
        assert!(bank.centers.windows(2).all(|c| c[0] < c[1]));
        for c in 0..bank.channels {
            let row = bank.row(c);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert_eq!(row.iter().cloned().fold(0.0, f64::max), 1.0, "channel {c} peak");
            let lo = if c == 0 { 0.0 } else { bank.centers[c - 1] };
            let hi = bank.centers.get(c + 1).copied().unwrap_or(SAMPLE_RATE as f64 / 2.0);
            for (k, &w) in row.iter().enumerate() {
                let f = k as f64 * bin_hz;
                if f <= lo || f >= hi {
                    assert_eq!(w, 0.0, "channel {c} leaks at {f} Hz");
                }
            }
        }
    }
    let linear = FilterBank::linear_default(&spec);
    let step = 4000.0 / 81.0;
    for (i, c) in linear.centers.iter().enumerate() {
        assert!((c - step * (i + 1) as f64).abs() < 1e-9);
    }
}

#[test]
fn sine_peaks_in_the_nearest_channel() {
    let ex = FeatureExtractor::standard();
    let m = ex.log_filterbank(&sine(1000.0, 0.8, 8000)).unwrap();
    let nearest = (0..80)
        .min_by(|&a, &b| (ex.bank.centers[a] - 1000.0).abs().total_cmp(&(ex.bank.centers[b] - 1000.0).abs()))
        .unwrap();
    for t in 0..m.frames {
        let argmax = (0..80).max_by(|&a, &b| m.get(t, a).total_cmp(&m.get(t, b))).unwrap();
        assert_eq!(argmax, nearest, "frame {t}");
    }
}

#[test]
fn short_input_is_rejected() {
    let err = FeatureExtractor::standard().log_filterbank(&Waveform::new(vec![0.1; 199])).unwrap_err();
    assert!(matches!(err, AudioError::TooShort { samples: 199, window: 200 }));
}

#[test]
fn wav_round_trip_and_format_checks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let w = sine(440.0, 0.5, 1234);
    write_wav(&path, &w).unwrap();
    let back = load_wav(&path).unwrap();
    assert_eq!(back.samples.len(), 1234);
    assert!(w.samples.iter().zip(&back.samples).all(|(a, b)| (a - b).abs() <= 1.0 / 32768.0));

    let wide = dir.path().join("16k.wav");
    write_wav(&wide, &Waveform { samples: vec![0.0; 10], sample_rate: 16000 }).unwrap();
    let err = load_wav(&wide).unwrap_err();
    assert!(matches!(err, AudioError::SampleRateMismatch { found: 16000, expected: 8000, .. }));
    assert!(err.to_string().contains("sample_rate"));

    let stereo = dir.path().join("stereo.wav");
    let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut writer = hound::WavWriter::create(&stereo, spec).unwrap();
    (0..8).for_each(|_| writer.write_sample(0i16).unwrap());
    writer.finalize().unwrap();
    assert!(matches!(load_wav(&stereo), Err(AudioError::ChannelCountMismatch { found: 2, .. })));

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav file at all").unwrap();
    assert!(matches!(load_wav(&junk), Err(AudioError::Malformed { .. })));
}
