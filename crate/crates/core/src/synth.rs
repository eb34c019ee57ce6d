//! Synthetic ATC corpora: phraseology-conforming transcripts and
//! role-conditioned tone-complex audio.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav, AudioError, Waveform, SAMPLE_RATE};
use crate::text::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Atco,
    Pilot,
}

impl Role {
    /// Class index; pilot is the positive class.
    pub fn label(self) -> usize {
        match self {
            Role::Atco => 0,
            Role::Pilot => 1,
        }
    }

    pub fn from_label(label: usize) -> Self {
        if label == 1 {
            Role::Pilot
        } else {
            Role::Atco
        }
    }

    pub fn other(self) -> Self {
        match self {
            Role::Atco => Role::Pilot,
            Role::Pilot => Role::Atco,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Atco => "atco",
            Role::Pilot => "pilot",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    #[default]
    English,
    /// Chinese-character phraseology; exercises per-character tokenisation.
    Cjk,
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "english" => Ok(Language::English),
            "cjk" => Ok(Language::Cjk),
            _ => Err(format!("unknown language `{s}` (english|cjk)")),
        }
    }
}

/// Word lists and templates for callsigns and commands.
#[derive(Clone, Debug)]
pub struct PhraseGrammar {
    pub airlines: Vec<&'static str>,
    pub held_out_airlines: Vec<&'static str>,
    pub waypoints: Vec<&'static str>,
    pub held_out_waypoints: Vec<&'static str>,
    /// Spoken digits 0..=9.
    pub digits: [&'static str; 10],
    pub language: Language,
}

impl PhraseGrammar {
    pub fn english() -> Self {
        Self {
            airlines: vec![
                "air china",
                "china eastern",
                "china southern",
                "hainan",
                "sichuan",
                "shenzhen air",
                "xiamen air",
                "shandong",
                "spring",
                "juneyao",
            ],
            held_out_airlines: vec!["lucky air", "tibet", "loong air", "okay jet"],
            waypoints: vec![
                "akube", "bidok", "dogar", "elnex", "gulot", "ikuvi", "lamen", "mopat", "nukti", "otpar", "pikas", "ranib",
                "sutak", "tonix", "ugrol", "vesar", "wuhug", "yabbo", "zelka", "ebtop",
            ],
            held_out_waypoints: vec!["kasop", "limez", "qumar", "tasik", "urdok", "fixan", "hobek", "jarud"],
            digits: ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"],
            language: Language::English,
        }
    }

    pub fn cjk() -> Self {
        Self {
            airlines: vec!["国航", "东航", "南航", "海航", "川航", "深航", "厦航", "山航"],
            held_out_airlines: vec!["祥鹏", "藏航", "长龙"],
            waypoints: vec!["大王庄", "黄城", "龙口", "安阳", "南阳", "武汉", "西安", "宜昌"],
            held_out_waypoints: vec!["雅安", "酉阳", "昭通"],
            digits: ["洞", "幺", "两", "三", "四", "五", "六", "拐", "八", "九"],
            language: Language::Cjk,
        }
    }

    pub fn for_language(language: Language) -> Self {
        match language {
            Language::English => Self::english(),
            Language::Cjk => Self::cjk(),
        }
    }

    fn spell(&self, digits: &[usize]) -> String {
        let words: Vec<&str> = digits.iter().map(|&d| self.digits[d]).collect();
        self.join(&words)
    }

    fn join(&self, parts: &[&str]) -> String {
        match self.language {
            Language::English => parts.join(" "),
            Language::Cjk => parts.concat(),
        }
    }

    fn callsign(&self, rng: &mut impl Rng, held_out: bool) -> String {
        let pool = if held_out { &self.held_out_airlines } else { &self.airlines };
        let airline = pool[rng.random_range(0..pool.len())];
        let number: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
        self.join(&[airline, &self.spell(&number)])
    }

    fn altitude(&self, rng: &mut impl Rng) -> String {
        let thousands = rng.random_range(1..10);
        let hundreds = rng.random_range(0..10);
        match self.language {
            Language::English => {
                let mut s = format!("{} thousand", self.digits[thousands]);
                if hundreds > 0 {
                    s.push_str(&format!(" {} hundred", self.digits[hundreds]));
                }
                s + " meters"
            }
            Language::Cjk => {
                let mut s = format!("{}千", self.digits[thousands]);
                if hundreds > 0 {
                    s.push_str(&format!("{}百", self.digits[hundreds]));
                }
                s + "米"
            }
        }
    }

    fn command(&self, rng: &mut impl Rng, held_out_waypoint: bool) -> String {
        let kind = if held_out_waypoint { 3 } else { rng.random_range(0..5) };
        let en = self.language == Language::English;
        match kind {
            0 => {
                let verb = if en { "climb to" } else { "上升到" };
                self.join(&[verb, &self.altitude(rng)])
            }
            1 => {
                let verb = if en { "descend to" } else { "下降到" };
                self.join(&[verb, &self.altitude(rng)])
            }
            2 => {
                let (verb, maintain) = if en { ("descend", "maintain") } else { ("下降", "保持") };
                self.join(&[verb, maintain, &self.altitude(rng)])
            }
            3 => {
                let pool = if held_out_waypoint { &self.held_out_waypoints } else { &self.waypoints };
                let wp = pool[rng.random_range(0..pool.len())];
                self.join(&[if en { "direct to" } else { "直飞" }, wp])
            }
            _ => {
                let side = rng.random_range(0..2);
                let heading = [rng.random_range(0..4), rng.random_range(0..10), rng.random_range(0..4) * 3 % 10];
                let turn = match (en, side) {
                    (true, 0) => "turn left heading",
                    (true, _) => "turn right heading",
                    (false, 0) => "左转航向",
                    (false, _) => "右转航向",
                };
                self.join(&[turn, &self.spell(&heading)])
            }
        }
    }

    fn separator(&self) -> &'static str {
        match self.language {
            Language::English => ", ",
            Language::Cjk => "，",
        }
    }
}

/// A generated utterance text with the phenomena it exhibits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub text: String,
    /// Breaks the callsign ordering convention.
    pub dfg: bool,
    /// Contains a held-out airline or waypoint.
    pub oov: bool,
}

/// Controller: callsign then command. Pilot readback: command then
/// callsign. A `dfg` utterance either drops the callsign or uses the other
/// role's ordering; an `oov` utterance uses a held-out airline or waypoint.
pub fn realize_transcript(role: Role, grammar: &PhraseGrammar, dfg: bool, oov: bool, rng: &mut impl Rng) -> Transcript {
    let drop_callsign = dfg && rng.random_bool(0.5);
    // held-out airline needs a callsign to live in
    let oov_airline = oov && !drop_callsign && rng.random_bool(0.5);
    let callsign = grammar.callsign(rng, oov_airline);
    let command = grammar.command(rng, oov && !oov_airline);
    let callsign_first = (role == Role::Atco) != dfg;
    let sep = grammar.separator();
    let text = if drop_callsign {
        command
    } else if callsign_first {
        format!("{callsign}{sep}{command}")
    } else {
        format!("{command}{sep}{callsign}")
    };
    Transcript { text, dfg, oov }
}

/// Draws the dfg and oov flags independently at the given rates.
pub fn generate_transcript(role: Role, grammar: &PhraseGrammar, dfg_rate: f64, oov_rate: f64, rng: &mut impl Rng) -> Transcript {
    let dfg = rng.random_bool(dfg_rate.clamp(0.0, 1.0));
    let oov = rng.random_bool(oov_rate.clamp(0.0, 1.0));
    realize_transcript(role, grammar, dfg, oov, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    /// Stationary white noise.
    Uniform,
    /// White noise under a slow amplitude modulation.
    TimeVarying,
}

/// Radio channel of one speaker role.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub role: Role,
    /// Gain slope above 3 kHz.
    pub tilt_db_per_khz: f64,
    pub noise: NoiseKind,
    pub snr_db: (f64, f64),
}

/// Frequency where the channel tilt starts.
pub const TILT_KNEE_HZ: f64 = 3000.0;
/// Nominal token duration.
pub const TOKEN_SECONDS: f64 = 0.12;
/// Maximum absolute deviation from [`TOKEN_SECONDS`] per token.
pub const TOKEN_JITTER_SECONDS: f64 = 0.02;
/// Output peak after normalisation.
pub const PEAK: f32 = 0.95;

impl ChannelProfile {
    pub fn for_role(role: Role) -> Self {
        match role {
            Role::Atco => Self {
                role,
                tilt_db_per_khz: 6.0,
                noise: NoiseKind::TimeVarying,
                snr_db: (15.0, 25.0),
            },
            Role::Pilot => Self {
                role,
                tilt_db_per_khz: -40.0,
                noise: NoiseKind::Uniform,
                snr_db: (10.0, 20.0),
            },
        }
    }

    /// Linear amplitude gain at `hz`.
    pub fn gain(&self, hz: f64) -> f64 {
        if hz <= TILT_KNEE_HZ {
            1.0
        } else {
            10f64.powf(self.tilt_db_per_khz * (hz - TILT_KNEE_HZ) / 1000.0 / 20.0)
        }
    }
}

/// FNV-1a; stable across platforms and releases.
fn token_hash(token: &str) -> u64 {
    token.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Fundamental frequency of a token, 120–300 Hz.
pub fn token_f0(token: &str) -> f64 {
    120.0 + (token_hash(token) % 181) as f64
}

fn tone_segment(token: &str, samples: usize, out: &mut Vec<f64>) {
    let sr = SAMPLE_RATE as f64;
    let f0 = token_f0(token);
    let h = token_hash(token);
    // a token-specific formant keeps segments with close f0 apart
    let formant = 500.0 + ((h >> 20) % 2000) as f64;
    let ramp = (0.01 * sr) as usize;
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|k| k as f64 * f0)
        .take_while(|&f| f < sr / 2.0 - 50.0)
        .enumerate()
        .map(|(i, f)| {
            let boost = 1.0 + 2.0 * (-((f - formant) / 300.0).powi(2)).exp();
            (f, boost / (i + 1) as f64)
        })
        .collect();
    for n in 0..samples {
        let t = n as f64 / sr;
        let env = (n.min(samples - 1 - n) as f64 / ramp as f64).min(1.0);
        let v: f64 = harmonics.iter().map(|&(f, a)| a * (2.0 * PI * f * t).sin()).sum();
        out.push(env * v);
    }
}

/// Applies the channel's spectral tilt to the whole signal.
fn apply_channel(signal: &mut [f64], profile: &ChannelProfile) {
    let n = signal.len();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let sr = SAMPLE_RATE as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *c *= profile.gain(bin as f64 * sr / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (v, c) in signal.iter_mut().zip(&buf) {
        *v = c.re / n as f64;
    }
}

/// Renders a transcript as tone-complex speech through a role channel.
/// Returns `None` if the transcript has no tokens.
pub fn synth_speech(transcript: &str, profile: &ChannelProfile, rng: &mut impl Rng) -> Option<Waveform> {
    let tokens = tokenize(transcript).ok()?;
    let sr = SAMPLE_RATE as f64;
    let mut speech = Vec::new();
    for t in &tokens {
        let secs = TOKEN_SECONDS + rng.random_range(-TOKEN_JITTER_SECONDS..=TOKEN_JITTER_SECONDS);
        tone_segment(t, (secs * sr).round() as usize, &mut speech);
    }
    let power = speech.iter().map(|v| v * v).sum::<f64>() / speech.len() as f64;
    let snr = rng.random_range(profile.snr_db.0..=profile.snr_db.1);
    let noise_std = (power / 10f64.powf(snr / 10.0)).sqrt();
    let (rate, phase) = (rng.random_range(0.5..3.0), rng.random_range(0.0..2.0 * PI));
    let normal = rand_distr::StandardNormal;
    for (n, v) in speech.iter_mut().enumerate() {
        let z: f64 = rng.sample(normal);
        let scale = match profile.noise {
            NoiseKind::Uniform => 1.0,
            NoiseKind::TimeVarying => 1.0 + 0.8 * (2.0 * PI * rate * n as f64 / sr + phase).sin(),
        };
        *v += noise_std * scale * z;
    }
    apply_channel(&mut speech, profile);
    let peak = speech.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    Some(Waveform::new(speech.iter().map(|v| (v / peak * PEAK as f64) as f32).collect()))
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn manifest_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split `{s}` (train|dev|test)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub pilot_fraction: f64,
    pub dfg_rate: f64,
    /// Applied to dev and test only, so held-out tokens never reach training.
    pub oov_rate: f64,
    /// Share of utterances rendered through the other role's channel
    /// (a speech-side stress condition; 0 keeps labels channel-sound).
    pub channel_swap_rate: f64,
    pub language: Language,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_dev: 200,
            n_test: 400,
            pilot_fraction: 0.582,
            dfg_rate: 0.1,
            oov_rate: 0.05,
            channel_swap_rate: 0.0,
            language: Language::English,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("pilot_fraction", self.pilot_fraction),
            ("dfg_rate", self.dfg_rate),
            ("oov_rate", self.oov_rate),
            ("channel_swap_rate", self.channel_swap_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        for (name, n) in [("n_train", self.n_train), ("n_dev", self.n_dev), ("n_test", self.n_test)] {
            if n == 0 {
                return Err(SynthError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Test => self.n_test,
        }
    }

    pub fn oov_rate_for(&self, split: Split) -> f64 {
        if split == Split::Train {
            0.0
        } else {
            self.oov_rate
        }
    }
}

/// One manifest line. `audio` is relative to the manifest's directory;
/// either modality may be absent in hand-written manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub role: Role,
    #[serde(default)]
    pub dfg: bool,
    #[serde(default)]
    pub oov: bool,
}

/// Planned content of one utterance, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct UtterancePlan {
    pub role: Role,
    pub transcript: Transcript,
    pub channel_swapped: bool,
    pub seed: u64,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one utterance, a pure function of `(seed, split, index)`.
pub fn utterance_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(mix(seed) ^ split as u64) ^ index as u64)
}

/// Exactly `round(rate · n)` true flags at seeded positions.
fn stratified(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    let k = (rate * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < k).collect();
    flags.shuffle(rng);
    flags
}

/// Roles and phenomena for every utterance of a split.
pub fn plan_split(config: &SynthConfig, split: Split) -> Vec<UtterancePlan> {
    let n = config.count(split);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ mix(split as u64 + 1)));
    let pilots = stratified(n, config.pilot_fraction, &mut rng);
    let dfg = stratified(n, config.dfg_rate, &mut rng);
    let oov = stratified(n, config.oov_rate_for(split), &mut rng);
    let swap = stratified(n, config.channel_swap_rate, &mut rng);
    let grammar = PhraseGrammar::for_language(config.language);
    (0..n)
        .map(|i| {
            let seed = utterance_seed(config.seed, split, i);
            let role = if pilots[i] { Role::Pilot } else { Role::Atco };
            let mut urng = ChaCha8Rng::seed_from_u64(seed);
            UtterancePlan {
                role,
                transcript: realize_transcript(role, &grammar, dfg[i], oov[i], &mut urng),
                channel_swapped: swap[i],
                seed,
            }
        })
        .collect()
}

/// Audio for a planned utterance.
pub fn render(plan: &UtterancePlan) -> Waveform {
    let channel_role = if plan.channel_swapped { plan.role.other() } else { plan.role };
    let mut rng = ChaCha8Rng::seed_from_u64(mix(plan.seed ^ 0x5eed));
    synth_speech(&plan.transcript.text, &ChannelProfile::for_role(channel_role), &mut rng)
        .expect("grammar output always has tokens")
}

/// Writes `{train,dev,test}.jsonl` plus `wav/<split>/<index>.wav` under
/// `out_dir`. Output is a pure function of `config`.
pub fn generate_corpus(config: &SynthConfig, out_dir: &Path) -> Result<(), SynthError> {
    config.validate()?;
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    for split in Split::ALL {
        let wav_dir = out_dir.join("wav").join(split.name());
        fs::create_dir_all(&wav_dir).map_err(io(&wav_dir))?;
        let manifest_path = out_dir.join(split.manifest_name());
        let mut manifest = String::new();
        for (i, plan) in plan_split(config, split).iter().enumerate() {
            let rel: PathBuf = ["wav", split.name(), &format!("{i:05}.wav")].iter().collect();
            write_wav(&out_dir.join(&rel), &render(plan))?;
            let entry = ManifestEntry {
                audio: Some(rel.to_string_lossy().replace('\\', "/")),
                text: Some(plan.transcript.text.clone()),
                role: plan.role,
                dfg: plan.transcript.dfg,
                oov: plan.transcript.oov,
            };
            manifest.push_str(&serde_json::to_string(&entry).expect("plain struct"));
            manifest.push('\n');
        }
        let mut f = fs::File::create(&manifest_path).map_err(io(&manifest_path))?;
        f.write_all(manifest.as_bytes()).map_err(io(&manifest_path))?;
    }
    Ok(())
}
