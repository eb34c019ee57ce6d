//! `key = value` run configuration files.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use sri_core::audio::FILTERBANK_CHANNELS;
use sri_core::nn::{ModelConfig, ModelKind};
use sri_core::pooling::{FusionKind, PoolingKind};
use sri_core::synth::{Language, SynthConfig};
use sri_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("{path}:{line}: unknown key `{key}`")]
    UnknownKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: key `{key}` given twice")]
    Duplicate { path: String, line: usize, key: String },
    #[error("{path}:{line}: bad value for `{key}`: {reason}")]
    BadValue {
        path: String,
        line: usize,
        key: String,
        reason: String,
    },
}

/// Model widths: the published sizes, a smaller desk-scale set, or the
/// gradient-check set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Preset {
    #[default]
    Paper,
    Compact,
    Tiny,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "compact" => Ok(Self::Compact),
            "tiny" => Ok(Self::Tiny),
            other => Err(format!("unknown preset `{other}` (paper|compact|tiny)")),
        }
    }
}

impl Preset {
    /// Widths for training on the standard front end.
    pub fn model_config(self, vocab_size: usize) -> ModelConfig {
        match self {
            Preset::Paper => ModelConfig::paper(vocab_size),
            Preset::Compact => ModelConfig::compact(vocab_size),
            Preset::Tiny => ModelConfig {
                feature_dim: FILTERBANK_CHANNELS,
                ..ModelConfig::tiny(vocab_size)
            },
        }
    }
}

/// Every field is optional; absent keys fall back to command-line flags
/// and then to the library defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: Option<ModelKind>,
    pub preset: Option<Preset>,
    pub pooling: Option<PoolingKind>,
    pub fusion: Option<FusionKind>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub class_weights: Option<bool>,
    pub n_train: Option<usize>,
    pub n_dev: Option<usize>,
    pub n_test: Option<usize>,
    pub pilot_fraction: Option<f64>,
    pub dfg_rate: Option<f64>,
    pub oov_rate: Option<f64>,
    pub channel_swap_rate: Option<f64>,
    pub language: Option<Language>,
}

fn set<T: FromStr>(slot: &mut Option<T>, value: &str) -> Result<(), String>
where
    T::Err: ToString,
{
    *slot = Some(value.parse().map_err(|e: T::Err| e.to_string())?);
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, path: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.into(),
                line,
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { path: path.into(), line });
            }
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Duplicate {
                    path: path.into(),
                    line,
                    key: key.into(),
                });
            }
            let result = match key {
                "model" => set(&mut cfg.model, value),
                "preset" => set(&mut cfg.preset, value),
                "pooling" => set(&mut cfg.pooling, value),
                "fusion" => set(&mut cfg.fusion, value),
                "learning_rate" => set(&mut cfg.learning_rate, value),
                "batch_size" => set(&mut cfg.batch_size, value),
                "max_epochs" => set(&mut cfg.max_epochs, value),
                "patience" => set(&mut cfg.patience, value),
                "seed" => set(&mut cfg.seed, value),
                "class_weights" => set(&mut cfg.class_weights, value),
                "n_train" => set(&mut cfg.n_train, value),
                "n_dev" => set(&mut cfg.n_dev, value),
                "n_test" => set(&mut cfg.n_test, value),
                "pilot_fraction" => set(&mut cfg.pilot_fraction, value),
                "dfg_rate" => set(&mut cfg.dfg_rate, value),
                "oov_rate" => set(&mut cfg.oov_rate, value),
                "channel_swap_rate" => set(&mut cfg.channel_swap_rate, value),
                "language" => set(&mut cfg.language, value),
                _ => {
                    return Err(ConfigError::UnknownKey {
                        path: path.into(),
                        line,
                        key: key.into(),
                    })
                }
            };
            result.map_err(|reason| ConfigError::BadValue {
                path: path.into(),
                line,
                key: key.into(),
                reason,
            })?;
            seen.push(key.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        Self::parse(&text, &shown)
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            seed: self.seed.unwrap_or(d.seed),
            class_weights: self.class_weights.unwrap_or(d.class_weights),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            n_train: self.n_train.unwrap_or(d.n_train),
            n_dev: self.n_dev.unwrap_or(d.n_dev),
            n_test: self.n_test.unwrap_or(d.n_test),
            pilot_fraction: self.pilot_fraction.unwrap_or(d.pilot_fraction),
            dfg_rate: self.dfg_rate.unwrap_or(d.dfg_rate),
            oov_rate: self.oov_rate.unwrap_or(d.oov_rate),
            channel_swap_rate: self.channel_swap_rate.unwrap_or(d.channel_swap_rate),
            language: self.language.unwrap_or(d.language),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = RunConfig::parse("# run\nmodel = crnn\nlearning_rate=0.001 # faster\n\npooling = average\n", "c").unwrap();
        assert_eq!(c.model, Some(ModelKind::Crnn));
        assert_eq!(c.learning_rate, Some(1e-3));
        assert_eq!(c.pooling, Some(PoolingKind::Average));
        assert_eq!(c.train_config().batch_size, 32);
    }

    #[test]
    fn unknown_key_names_the_line() {
        let err = RunConfig::parse("seed = 1\nlearnig_rate = 0.1\n", "run.cfg").unwrap_err();
        assert_eq!(err.to_string(), "run.cfg:2: unknown key `learnig_rate`");
    }

    #[test]
    fn bad_values_and_syntax() {
        assert!(matches!(RunConfig::parse("batch_size = many", "c"), Err(ConfigError::BadValue { line: 1, .. })));
        assert!(matches!(RunConfig::parse("just words", "c"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2", "c"), Err(ConfigError::Duplicate { line: 2, .. })));
    }
}
