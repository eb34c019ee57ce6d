//! The `sri` command: corpus synthesis, training, evaluation, prediction
//! and gradient self-checks.

pub mod checkpoint;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sri_core::audio::load_wav;
use sri_core::autodiff::suite::{primitive_suite, PRIMITIVE_TOLERANCE};
use sri_core::nn::gradcheck::{check_kind, MODEL_TOLERANCE};
use sri_core::nn::{ModelConfig, ModelGraph, ModelKind};
use sri_core::pooling::{FusionKind, PoolingKind};
use sri_core::synth::{generate_corpus, Language, Role, Split};
use sri_core::train::{evaluate, train, Dataset, EpochRecord, Frontend, Manifest};

use checkpoint::{Checkpoint, Metadata};
use config::{Preset, RunConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const DEV_METRICS_FILE: &str = "dev_metrics.json";

#[derive(Debug, Parser)]
#[command(name = "sri", version, about = "Speaker role identification for ATC radio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with wav files and JSONL manifests.
    Synth(SynthArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Classify a single utterance.
    Predict(PredictArgs),
    /// Finite-difference check of every primitive and model kind.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    pilot_frac: Option<f64>,
    #[arg(long)]
    dfg_rate: Option<f64>,
    #[arg(long)]
    oov_rate: Option<f64>,
    /// Fraction of utterances rendered with the other role's channel.
    #[arg(long)]
    swap_rate: Option<f64>,
    #[arg(long)]
    language: Option<Language>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    /// Directory holding train.jsonl and dev.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pooling: Option<PoolingKind>,
    #[arg(long)]
    fusion: Option<FusionKind>,
    /// Width preset: paper, compact or tiny.
    #[arg(long)]
    preset: Option<Preset>,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    class_weights: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampled entries per parameter tensor in the model checks.
    #[arg(long, default_value_t = 3)]
    per_param: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    GradcheckFailed(usize),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::GradcheckFailed(_) => 3,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            config::ConfigError::Io { .. } => CliError::Data(format!("--config {e}")),
            other => CliError::Usage(format!("--config {other}")),
        }),
        None => Ok(RunConfig::default()),
    }
}

fn manifest(data: &Path, split: Split) -> Result<Manifest, CliError> {
    Manifest::read(&data.join(split.manifest_name())).map_err(data_err)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let rc = load_config(a.config.as_deref())?;
    let mut cfg = rc.synth_config();
    cfg.n_train = a.n_train.unwrap_or(cfg.n_train);
    cfg.n_dev = a.n_dev.unwrap_or(cfg.n_dev);
    cfg.n_test = a.n_test.unwrap_or(cfg.n_test);
    cfg.pilot_fraction = a.pilot_frac.unwrap_or(cfg.pilot_fraction);
    cfg.dfg_rate = a.dfg_rate.unwrap_or(cfg.dfg_rate);
    cfg.oov_rate = a.oov_rate.unwrap_or(cfg.oov_rate);
    cfg.channel_swap_rate = a.swap_rate.unwrap_or(cfg.channel_swap_rate);
    cfg.language = a.language.unwrap_or(cfg.language);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    generate_corpus(&cfg, &a.out).map_err(data_err)?;
    let _ = writeln!(
        out,
        "wrote {} train / {} dev / {} test utterances to {}",
        cfg.n_train,
        cfg.n_dev,
        cfg.n_test,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let rc = load_config(a.config.as_deref())?;
    let kind = a
        .model
        .or(rc.model)
        .ok_or_else(|| CliError::Usage("--model is required (or `model` in --config)".into()))?;
    let mut tc = rc.train_config();
    tc.seed = a.seed.unwrap_or(tc.seed);
    tc.class_weights |= a.class_weights;
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let train_m = manifest(&a.data, Split::Train)?;
    let dev_m = manifest(&a.data, Split::Dev)?;
    let mut frontend = Frontend::fit(kind, &train_m).map_err(data_err)?;
    let mut mc: ModelConfig = a.preset.or(rc.preset).unwrap_or_default().model_config(frontend.vocab_size());
    mc.pooling = a.pooling.or(rc.pooling);
    mc.fusion = a.fusion.or(rc.fusion).unwrap_or(mc.fusion);
    let mut model = ModelGraph::<f32>::new(kind, mc, tc.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    frontend.fit_model(&model);
    let train_set = frontend.dataset(&train_m).map_err(data_err)?;
    let dev_set = frontend.dataset(&dev_m).map_err(data_err)?;

    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("--out {}: {e}", a.out.display())))?;
    let _ = writeln!(
        out,
        "training {kind} ({} parameters, pooling {}) on {} utterances",
        model.num_parameters(),
        model.pooling(),
        train_set.len()
    );
    let mut history = String::new();
    let outcome = train(&mut model, &train_set, &dev_set, &tc, |r: &EpochRecord| {
        let _ = writeln!(out, "epoch {:>3}  loss {:.6}  dev acc {:.4}", r.epoch, r.train_loss, r.dev_acc);
        history.push_str(&serde_json::to_string(r).expect("record serializes"));
        history.push('\n');
    })
    .map_err(data_err)?;
    write_file(&a.out.join(HISTORY_FILE), history)?;

    let meta = Metadata::new(&model, tc.seed, &frontend, Some(tc.clone()));
    checkpoint::save(&a.out.join(CHECKPOINT_FILE), &Checkpoint::from_model(&model, meta)).map_err(data_err)?;
    let report = evaluate(&model, &dev_set, 0.5, tc.batch_size).map_err(data_err)?;
    write_file(&a.out.join(DEV_METRICS_FILE), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let _ = writeln!(
        out,
        "best epoch {} dev acc {:.4}; checkpoint at {}",
        outcome.best_epoch,
        outcome.best_dev_acc,
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, frontend, _) = checkpoint::load_model(&a.checkpoint).map_err(data_err)?;
    let m = manifest(&a.data, a.split)?;
    let data = frontend.dataset(&m).map_err(data_err)?;
    let report = evaluate(&model, &data, a.threshold, 32).map_err(data_err)?;
    let _ = writeln!(out, "{} on {} ({} utterances)", model.kind, a.split.name(), data.len());
    let _ = writeln!(out, "{report}");
    let _ = writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn predict_cmd(a: PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, frontend, _) = checkpoint::load_model(&a.checkpoint).map_err(data_err)?;
    let kind = model.kind;
    if kind.uses_text() && a.text.is_none() {
        return Err(CliError::Usage(format!("--text is required by model `{kind}`")));
    }
    if kind.uses_audio() && a.wav.is_none() {
        return Err(CliError::Usage(format!("--wav is required by model `{kind}`")));
    }
    let wave = match (&a.wav, kind.uses_audio()) {
        (Some(p), true) => Some(load_wav(p).map_err(|e| CliError::Data(format!("--wav {e}")))?),
        _ => None,
    };
    let text = a.text.as_deref().filter(|_| kind.uses_text());
    let example = frontend
        .example(text, wave.as_ref(), 0)
        .map_err(|e| CliError::Data(format!("--text: {e}")))?;
    let data = Dataset { examples: vec![example] };
    let (batch, _) = data.batch::<f32>(&[0]);
    let probs = model.predict(&batch).map_err(data_err)?;
    let p = probs.data()[1] as f64;
    let role = if p >= 0.5 { Role::Pilot } else { Role::Atco };
    let _ = writeln!(out, "{}", json!({ "role": role, "p_pilot": p }));
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut failed = 0;
    let _ = writeln!(out, "{:<26} {:>12} {:>8}  status", "primitive", "max rel err", "coords");
    for c in primitive_suite(a.seed).map_err(data_err)? {
        failed += usize::from(!c.report.passed);
        let status = if c.report.passed { "ok" } else { "FAIL" };
        let _ = writeln!(out, "{:<26} {:>12.3e} {:>8}  {status}", c.name, c.report.max_rel_error, c.report.checked);
    }
    let _ = writeln!(out, "primitive tolerance {PRIMITIVE_TOLERANCE:e}\n");
    let _ = writeln!(out, "{:<26} {:>12} {:>8} {:>8}  status", "model", "max rel err", "coords", "skipped");
    for kind in ModelKind::ALL {
        let model = ModelGraph::<f64>::new(kind, ModelConfig::tiny(12), a.seed).map_err(data_err)?;
        for c in check_kind(&model, a.per_param, a.seed).map_err(data_err)? {
            failed += usize::from(!c.report.passed);
            let status = if c.report.passed { "ok" } else { "FAIL" };
            let label = format!("{kind} ({:?})", c.mode).to_lowercase();
            let _ = writeln!(
                out,
                "{label:<26} {:>12.3e} {:>8} {:>8}  {status}",
                c.report.max_rel_error, c.report.checked, c.skipped
            );
        }
    }
    let _ = writeln!(out, "model tolerance {MODEL_TOLERANCE:e}");
    if failed > 0 {
        return Err(CliError::GradcheckFailed(failed));
    }
    Ok(())
}

/// Runs the command line `args` (program name first) and returns the exit
/// code: 0 success, 1 usage, 2 data or format, 3 failed gradient check.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let shown = e.render().to_string();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{shown}");
                0
            } else {
                let _ = write!(err, "{shown}");
                1
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Predict(a) => predict_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Data(m) => m.clone(),
                CliError::GradcheckFailed(n) => format!("gradient check failed for {n} entries"),
            };
            let _ = writeln!(err, "error: {msg}");
            e.code()
        }
    }
}

pub fn run(args: Vec<String>) -> i32 {
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}
