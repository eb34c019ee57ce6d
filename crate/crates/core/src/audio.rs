//! 8 kHz waveforms and log-filterbank features.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 8000;
/// Filterbank channels of the standard front end.
pub const FILTERBANK_CHANNELS: usize = 80;
/// Energies are clamped here before the log.
pub const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed WAV ({reason})")]
    Malformed { path: String, reason: String },
    #[error("{path}: sample_rate is {found} Hz, expected {expected} Hz")]
    SampleRateMismatch { path: String, expected: u32, found: u32 },
    #[error("{path}: channels is {found}, expected 1 (mono)")]
    ChannelCountMismatch { path: String, found: u16 },
    #[error("{path}: encoding is {found}, expected 16-bit integer PCM")]
    UnsupportedEncoding { path: String, found: String },
    #[error("{path}: no samples")]
    EmptyAudio { path: String },
    #[error("waveform has {samples} samples, shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid frame spec: {0}")]
    BadFrameSpec(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads RIFF/WAVE PCM16 mono 8 kHz; samples are scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform, AudioError> {
    let p = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => AudioError::Io { path: p.clone(), source },
        other => AudioError::Malformed {
            path: p.clone(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding {
            path: p,
            found: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    if spec.channels != 1 {
        return Err(AudioError::ChannelCountMismatch {
            path: p,
            found: spec.channels,
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::SampleRateMismatch {
            path: p,
            expected: SAMPLE_RATE,
            found: spec.sample_rate,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<f32>, _>>()
        .map_err(|e| AudioError::Malformed {
            path: p.clone(),
            reason: e.to_string(),
        })?;
    if samples.is_empty() {
        return Err(AudioError::EmptyAudio { path: p });
    }
    Ok(Waveform::new(samples))
}

/// Writes PCM16 mono; values are clipped to [−1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), AudioError> {
    let p = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::Io { path: p.clone(), source },
        other => AudioError::Malformed {
            path: p.clone(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &w.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

/// Removes the mean, then scales to unit peak (all-zero input is
/// returned unchanged).
pub fn normalize_waveform(w: &Waveform) -> Waveform {
    let n = w.samples.len().max(1) as f64;
    let mean = w.samples.iter().map(|&s| s as f64).sum::<f64>() / n;
    let centered: Vec<f64> = w.samples.iter().map(|&s| s as f64 - mean).collect();
    let peak = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let samples = if peak > 0.0 {
        centered.iter().map(|v| (v / peak) as f32).collect()
    } else {
        centered.iter().map(|&v| v as f32).collect()
    };
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub window_length: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for FrameSpec {
    /// 25 ms Hamming windows with 15 ms overlap at 8 kHz.
    fn default() -> Self {
        Self {
            window_length: 200,
            hop: 80,
            fft_size: 256,
        }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.hop == 0 || self.hop > self.window_length || self.window_length > self.fft_size {
            return Err(AudioError::BadFrameSpec(format!(
                "need 0 < hop ({}) <= window ({}) <= fft ({})",
                self.hop, self.window_length, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn overlap(&self) -> usize {
        self.window_length - self.hop
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((n − window) / hop) + 1`, or 0 for inputs shorter than a window.
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window_length {
            0
        } else {
            (samples - self.window_length) / self.hop + 1
        }
    }

    /// Symmetric Hamming window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length;
        (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterScale {
    Linear,
    Mel,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over the one-sided power spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    /// `channels × bins`, row-major.
    pub weights: Vec<f64>,
    pub channels: usize,
    pub bins: usize,
    /// Centre frequency of each filter, Hz.
    pub centers: Vec<f64>,
}

impl FilterBank {
    /// `channels` triangles whose edge points are evenly spaced over
    /// 0..Nyquist on the chosen scale; each filter is scaled to peak 1.
    pub fn new(channels: usize, spec: &FrameSpec, sample_rate: u32, scale: FilterScale) -> Self {
        let bins = spec.bins();
        let nyquist = sample_rate as f64 / 2.0;
        let (fwd, inv): (fn(f64) -> f64, fn(f64) -> f64) = match scale {
            FilterScale::Linear => (|f| f, |f| f),
            FilterScale::Mel => (hz_to_mel, mel_to_hz),
        };
        let top = fwd(nyquist);
        let edges: Vec<f64> = (0..channels + 2)
            .map(|i| inv(top * i as f64 / (channels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / spec.fft_size as f64;
        let mut weights = vec![0.0; channels * bins];
        for c in 0..channels {
            let (lo, mid, hi) = (edges[c], edges[c + 1], edges[c + 2]);
            let row = &mut weights[c * bins..(c + 1) * bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
            }
            let peak = row.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                row.iter_mut().for_each(|w| *w /= peak);
            }
        }
        Self {
            weights,
            channels,
            bins,
            centers: edges[1..=channels].to_vec(),
        }
    }

    /// The default linear bank for 8 kHz audio.
    pub fn linear_default(spec: &FrameSpec) -> Self {
        Self::new(FILTERBANK_CHANNELS, spec, SAMPLE_RATE, FilterScale::Linear)
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.bins..(c + 1) * self.bins]
    }

    /// `weights · power` per channel.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.row(c).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// `frames × channels` log energies, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn get(&self, frame: usize, channel: usize) -> f32 {
        self.values[frame * self.channels + channel]
    }

    /// Per-utterance mean/variance normalisation of every channel.
    pub fn normalize_per_utterance(&mut self) {
        let n = self.frames as f64;
        for c in 0..self.channels {
            let col: Vec<f64> = (0..self.frames).map(|t| self.get(t, c) as f64).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-8).sqrt();
            for (t, v) in col.iter().enumerate() {
                self.values[t * self.channels + c] = ((v - mean) * inv) as f32;
            }
        }
    }
}

/// Reusable feature extractor (keeps the FFT plan and window).
pub struct FeatureExtractor {
    pub spec: FrameSpec,
    pub bank: FilterBank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(spec: FrameSpec, bank: FilterBank) -> Result<Self, AudioError> {
        spec.validate()?;
        if bank.bins != spec.bins() {
            return Err(AudioError::BadFrameSpec(format!(
                "filter bank expects {} bins, frame spec yields {}",
                bank.bins,
                spec.bins()
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(spec.fft_size);
        Ok(Self {
            window: spec.window(),
            spec,
            bank,
            fft,
        })
    }

    pub fn standard() -> Self {
        let spec = FrameSpec::default();
        Self::new(spec, FilterBank::linear_default(&spec)).expect("default spec is valid")
    }

    /// One-sided power spectrum of the windowed frame starting at `start`.
    pub fn power_spectrum(&self, samples: &[f32], start: usize) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.spec.fft_size];
        for (i, w) in self.window.iter().enumerate() {
            buf[i].re = samples[start + i] as f64 * w;
        }
        self.fft.process(&mut buf);
        buf[..self.spec.bins()].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Pre-log filterbank energies, `frames × channels`.
    pub fn energies(&self, w: &Waveform) -> Result<Vec<Vec<f64>>, AudioError> {
        let frames = self.spec.frame_count(w.samples.len());
        if frames == 0 {
            return Err(AudioError::TooShort {
                samples: w.samples.len(),
                window: self.spec.window_length,
            });
        }
        Ok((0..frames)
            .map(|t| self.bank.apply(&self.power_spectrum(&w.samples, t * self.spec.hop)))
            .collect())
    }

    pub fn log_filterbank(&self, w: &Waveform) -> Result<FeatureMatrix, AudioError> {
        let energies = self.energies(w)?;
        let values = energies
            .iter()
            .flat_map(|row| row.iter().map(|&e| e.max(ENERGY_FLOOR).ln() as f32))
            .collect();
        Ok(FeatureMatrix {
            frames: energies.len(),
            channels: self.bank.channels,
            values,
        })
    }
}

/// One-shot feature extraction; see [`FeatureExtractor`] for repeated use.
pub fn log_filterbank(w: &Waveform, spec: &FrameSpec, bank: &FilterBank) -> Result<FeatureMatrix, AudioError> {
    FeatureExtractor::new(*spec, bank.clone())?.log_filterbank(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frame_spec() {
        let s = FrameSpec::default();
        assert_eq!((s.window_length, s.hop, s.overlap(), s.bins()), (200, 80, 120, 129));
        assert_eq!(s.frame_count(8000), 98);
        assert_eq!(s.frame_count(199), 0);
        assert_eq!(s.frame_count(200), 1);
    }

    #[test]
    fn normalize_examples() {
        let w = normalize_waveform(&Waveform::new(vec![0.5, -0.5]));
        assert_eq!(w.samples, vec![1.0, -1.0]);
        let c = normalize_waveform(&Waveform::new(vec![0.3, 0.3]));
        assert!(c.samples.iter().all(|&v| v.abs() < 1e-7));
        let z = normalize_waveform(&Waveform::new(vec![0.0; 4]));
        assert_eq!(z.samples, vec![0.0; 4]);
    }

    #[test]
    fn filters_peak_at_one_and_centers_increase() {
        let spec = FrameSpec::default();
        for scale in [FilterScale::Linear, FilterScale::Mel] {
            let fb = FilterBank::new(80, &spec, 8000, scale);
            assert_eq!((fb.channels, fb.bins), (80, 129));
            for c in 0..80 {
                let row = fb.row(c);
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!((row.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
            }
            assert!(fb.centers.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let fx = FeatureExtractor::standard();
        let m = fx.log_filterbank(&Waveform::new(vec![0.0; 8000])).unwrap();
        assert_eq!((m.frames, m.channels), (98, 80));
        assert!(m.values.iter().all(|&v| (v as f64 - ENERGY_FLOOR.ln()).abs() < 1e-4));
        assert!(matches!(
            fx.log_filterbank(&Waveform::new(vec![0.0; 100])),
            Err(AudioError::TooShort { .. })
        ));
    }
}
