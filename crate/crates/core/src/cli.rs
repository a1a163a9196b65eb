//! Command-line front end: `train`, `denoise`, `eval`, `gradcheck`, `synth`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 I/O error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{derive_seed, list_images, load_image, save_image, synthesize_dir, ImageSample};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all_ops, check_blocks, check_default_model, GradCheckReport, COMPOSITE_EPS, DEFAULT_EPS};
use crate::metrics::evaluate;
use crate::model::{denoise_padded, Denoiser, Model, ModelConfig, Passthrough};
use crate::train::{CheckpointPolicy, TrainSchedule, Trainer};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "MSANET_THREADS";

/// Everything a training run needs, as read from a TOML document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub data: DataPaths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train_dir: Option<PathBuf>,
    /// Held-out images scored after every epoch; the best scoring
    /// checkpoint is kept as `best.msan`.
    pub val_dir: Option<PathBuf>,
    /// Convert color images to one luma channel.
    pub grayscale: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()
    }

    fn grayscale(&self) -> bool {
        self.data.grayscale || self.model.in_channels == 1
    }
}

#[derive(Debug, Parser)]
#[command(name = "msanet", version, about = "Multi-scale adaptive image denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on synthetic AWGN pairs.
    Train(TrainArgs),
    /// Denoise one image or every image in a directory.
    Denoise(DenoiseArgs),
    /// Score a denoiser on noisy copies of clean images.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write noisy counterparts of clean images.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Clean training images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out clean images for per-epoch validation.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and the training report.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file, or directory when `--input` is a directory.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score; `none` together with `--passthrough`.
    #[arg(long, required_unless_present = "passthrough")]
    pub ckpt: Option<PathBuf>,
    /// Score the noisy input itself (identity denoiser).
    #[arg(long)]
    pub passthrough: bool,
    #[arg(long)]
    pub clean_dir: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub sigma: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Convert color images to luma first.
    #[arg(long)]
    pub grayscale: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Op,
    Block,
    Model,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "op")]
    pub scope: Scope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step; defaults to 1e-3 for ops, 1e-5 otherwise.
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clean_dir: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub sigma: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) | Error::Corrupt { .. } => EXIT_IO,
        Error::Contract(_) => EXIT_VERIFY,
        Error::Shape(_) | Error::Argument(_) | Error::Config(_) | Error::ConfigMismatch { .. } => EXIT_USAGE,
    }
}

/// Installs the logger (ISO-8601 timestamps, `RUST_LOG` filter, default
/// `info`) and sizes the worker pool from `MSANET_THREADS`.
pub fn init_runtime() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .try_init();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                    log::warn!("thread pool already initialized; ignoring {THREADS_ENV}");
                }
            }
            _ => log::warn!("ignoring {THREADS_ENV}={v}: expected a positive integer"),
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: &Command) -> Result<u8> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn log_config(cfg: &RunConfig) {
    log::info!("resolved config:\n{}", cfg.to_toml());
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let s = &mut cfg.schedule;
    if let Some(v) = a.sigma {
        s.sigma = v;
    }
    if let Some(v) = a.epochs {
        s.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        s.steps_per_epoch = v;
    }
    if let Some(v) = a.batch {
        s.batch = v;
    }
    if let Some(v) = a.patch {
        s.patch = v;
    }
    if let Some(v) = a.lr {
        s.lr0 = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(d) = &a.data {
        cfg.data.train_dir = Some(d.clone());
    }
    if let Some(d) = &a.val {
        cfg.data.val_dir = Some(d.clone());
    }
    if cfg.data.train_dir.is_none() {
        return Err(Error::Argument("no training data: pass --data or set data.train_dir".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_channels(pairs: &[ImageSample], expected: usize) -> Result<()> {
    match pairs.iter().find(|p| p.shape().c != expected) {
        Some(p) => Err(Error::Config(format!(
            "{} has {} channels but the model takes {expected}",
            p.source_path,
            p.shape().c
        ))),
        None => Ok(()),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let mut cfg = resolve_train_config(a)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
            // the checkpoint owns model and schedule
            cfg.model = t.model.config.clone();
            cfg.schedule = t.schedule.clone();
            log::info!("resuming {} at step {}/{}", path.display(), t.step, t.total_steps());
            t
        }
        None => Trainer::new(Model::build(cfg.model.clone(), cfg.schedule.seed)?, cfg.schedule.clone())?,
    };
    log_config(&cfg);
    if a.resume.is_some() && trainer.is_complete() {
        log::info!("schedule complete; nothing to do");
        println!("schedule complete");
        return Ok(EXIT_OK);
    }
    let s = &cfg.schedule;
    let train_dir = cfg.data.train_dir.as_ref().expect("checked during resolution");
    let data = synthesize_dir(train_dir, s.sigma, s.seed, cfg.grayscale())?;
    check_channels(&data, cfg.model.in_channels)?;
    let val = match &cfg.data.val_dir {
        Some(d) => {
            let v = synthesize_dir(d, s.sigma, derive_seed(s.seed, "validation"), cfg.grayscale())?;
            check_channels(&v, cfg.model.in_channels)?;
            Some(v)
        }
        None => None,
    };
    log::info!(
        "{} training images, {} parameters, {} steps",
        data.len(),
        trainer.model.count_params(),
        trainer.total_steps()
    );

    create_dir(&a.out)?;
    let cfg_path = a.out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let policy = CheckpointPolicy { dir: a.out.clone() };
    if trainer.step == 0 {
        trainer.checkpoint().save(policy.epoch_path(0))?;
    }
    trainer.fit(&data, val.as_deref(), Some(&policy), None)?;
    trainer.checkpoint().save(a.out.join("final.msan"))?;
    trainer.write_report(policy.report_path())?;
    if let Some(last) = trainer.report.epochs.last() {
        println!("epoch {} mean loss {:.6e}", last.epoch, last.mean_loss);
    }
    Ok(EXIT_OK)
}

fn load_model(path: &Path) -> Result<Model> {
    let model = Checkpoint::load(path)?.into_model()?;
    log::info!("model config:\n{}", toml::to_string(&model.config).unwrap_or_default());
    Ok(model)
}

fn denoise_file(model: &Model, input: &Path, output: &Path) -> Result<()> {
    let noisy = load_image(input)?;
    let out = denoise_padded(model, &noisy).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", input.display())),
        other => other,
    })?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(&out.clamp(0.0, 1.0), output)
}

pub fn cmd_denoise(a: &DenoiseArgs) -> Result<u8> {
    let model = load_model(&a.ckpt)?;
    if a.input.is_dir() {
        let files = list_images(&a.input)?;
        if files.is_empty() {
            return Err(Error::Argument(format!("no images in {}", a.input.display())));
        }
        create_dir(&a.output)?;
        for f in &files {
            let name = f.file_name().expect("listed files have names");
            denoise_file(&model, f, &a.output.join(name))?;
            log::info!("denoised {}", f.display());
        }
        println!("{} images written to {}", files.len(), a.output.display());
    } else {
        denoise_file(&model, &a.input, &a.output)?;
        println!("wrote {}", a.output.display());
    }
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let model = match (&a.ckpt, a.passthrough) {
        (_, true) => None,
        (Some(p), false) => Some(load_model(p)?),
        (None, false) => return Err(Error::Argument("--ckpt is required without --passthrough".into())),
    };
    let d: &dyn Denoiser = match &model {
        Some(m) => m,
        None => &Passthrough,
    };
    let gray = a.grayscale || d.in_channels() == Some(1);
    let pairs = synthesize_dir(&a.clean_dir, a.sigma, a.seed, gray)?;
    let report = evaluate(d, &pairs)?;
    if let Some(path) = &a.report {
        report.write_csv(path)?;
    }
    println!(
        "{} images  mean PSNR {:.4} dB  mean SSIM {:.4}",
        report.images.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let eps = a.eps.unwrap_or(if a.scope == Scope::Op { DEFAULT_EPS } else { COMPOSITE_EPS });
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("--eps must be positive, got {eps}")));
    }
    let reports: Vec<GradCheckReport> = match a.scope {
        Scope::Op => check_all_ops(a.seed, eps)?,
        Scope::Block => check_blocks(a.seed, eps)?,
        Scope::Model => vec![check_default_model(a.seed, eps)?],
    };
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.target.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(EXIT_OK)
    } else {
        println!("FAILED: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<u8> {
    if !(a.sigma >= 0.0) {
        return Err(Error::Argument(format!("--sigma must be non-negative, got {}", a.sigma)));
    }
    let pairs = synthesize_dir(&a.clean_dir, a.sigma, a.seed, false)?;
    create_dir(&a.out)?;
    for p in &pairs {
        let name = Path::new(&p.source_path).file_name().expect("listed files have names");
        save_image(&p.noisy, a.out.join(name))?;
    }
    println!("{} noisy images written to {}", pairs.len(), a.out.display());
    Ok(EXIT_OK)
}
