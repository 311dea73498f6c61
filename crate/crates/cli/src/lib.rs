//! Command-line workflows: corpus preparation, training, estimation,
//! analysis and evaluation.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rirest::error::ErrorKind;
use rirest::{BoundaryMode, FusionMethod, Preset, RunConfig};

mod checkpoint;
mod commands;
mod prepare;

pub use checkpoint::{Checkpoint, BRPE_FILE, CONFIG_FILE, MODEL_FILE};
pub use commands::{AnalysisReport, EstimateSidecar};

#[derive(Debug, Parser)]
#[command(name = "rirest", version, about = "Blind room impulse response estimation from reverberant speech")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file for `estimate`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Resample input audio to 16 kHz instead of rejecting it.
    #[arg(long, global = true)]
    pub resample: bool,
    /// Configuration preset used when no --config is given.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, global = true, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, global = true, value_enum)]
    pub boundary: Option<BoundaryArg>,
    /// Condition the decoder on ground-truth room parameters.
    #[arg(long, global = true)]
    pub ground_truth_params: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Hybrid,
    Naive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BoundaryArg {
    Dynamic,
    Fixed50ms,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a corpus of reverberant clips, RIRs and labels.
    PrepareData {
        /// Directory of anechoic speech WAVs (synthetic speech when absent).
        #[arg(long)]
        speech_dir: Option<PathBuf>,
        /// Directory of measured RIR WAVs; subdirectories group RIRs by room.
        #[arg(long)]
        rir_dir: Option<PathBuf>,
        /// Number of synthetic rooms (defaults to the configuration).
        #[arg(long)]
        synth: Option<usize>,
    },
    /// Self-supervised pretraining of the parameter estimator.
    PretrainBrpe {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Supervised fine-tuning of the parameter estimator.
    FinetuneBrpe {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint directory holding pretrained weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train the RIR estimator against a frozen parameter estimator.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint directory holding the fine-tuned estimator.
        #[arg(long)]
        brpe: Option<PathBuf>,
    },
    /// Estimate the RIR of one reverberant speech file.
    Estimate {
        speech: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decay, DRR, echo density and boundary point of an RIR file.
    AnalyzeRir { rir: PathBuf },
    /// Metrics and plots on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// A failure tagged with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError {
        kind: ErrorKind::Usage,
        message: msg.into(),
    }
    .into()
}

pub fn data_error(msg: impl Into<String>) -> anyhow::Error {
    CliError {
        kind: ErrorKind::Data,
        message: msg.into(),
    }
    .into()
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let kind = if let Some(e) = cause.downcast_ref::<CliError>() {
            Some(e.kind)
        } else if let Some(e) = cause.downcast_ref::<rirest::Error>() {
            Some(e.kind())
        } else if cause.is::<std::io::Error>() {
            Some(ErrorKind::Data)
        } else {
            None
        };
        if let Some(kind) = kind {
            return match kind {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Runtime => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

impl GlobalArgs {
    /// The configuration for a command: --config, else `fallback` (a
    /// checkpoint's saved config), else the preset; then flag overrides.
    pub fn resolve_config(&self, fallback: Option<&Path>) -> anyhow::Result<RunConfig> {
        if self.config.is_some() && self.preset.is_some() {
            return Err(usage("--config and --preset are mutually exclusive"));
        }
        let mut cfg = match (&self.config, fallback, self.preset) {
            (Some(path), _, _) => RunConfig::load(path)?,
            (None, _, Some(p)) => RunConfig::preset(match p {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Desk => Preset::Desk,
            }),
            (None, Some(path), None) => RunConfig::load(path)?,
            (None, None, None) => RunConfig::paper(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(f) = self.fusion {
            cfg = cfg.with_fusion(match f {
                FusionArg::Hybrid => FusionMethod::HybridCrossAttention,
                FusionArg::Naive => FusionMethod::Naive,
            });
        }
        if let Some(b) = self.boundary {
            cfg = cfg.with_boundary(match b {
                BoundaryArg::Dynamic => BoundaryMode::Dynamic,
                BoundaryArg::Fixed50ms => BoundaryMode::Fixed50ms,
            });
        }
        if self.ground_truth_params {
            cfg = cfg.with_ground_truth(true);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| usage("--out is required for this command"))
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::PrepareData {
            speech_dir,
            rir_dir,
            synth,
        } => {
            let cfg = g.resolve_config(None)?;
            prepare::prepare_data(&cfg, g.out_dir()?, speech_dir.as_deref(), rir_dir.as_deref(), *synth, g.resample)
        }
        Command::PretrainBrpe { manifest } => {
            let cfg = g.resolve_config(None)?;
            commands::pretrain(&cfg, manifest, g.out_dir()?, g.resample)
        }
        Command::FinetuneBrpe { manifest, init } => {
            let saved = init.as_ref().map(|d| d.join(CONFIG_FILE));
            let cfg = g.resolve_config(saved.as_deref().filter(|p| p.exists()))?;
            commands::finetune(&cfg, manifest, init.as_deref(), g.out_dir()?, g.resample)
        }
        Command::Train { manifest, brpe } => {
            let saved = brpe.as_ref().map(|d| d.join(CONFIG_FILE));
            let cfg = g.resolve_config(saved.as_deref().filter(|p| p.exists()))?;
            commands::train(&cfg, manifest, brpe.as_deref(), g.out_dir()?, g.resample)
        }
        Command::Estimate { speech, checkpoint } => {
            let cfg = g.resolve_config(Some(&checkpoint.join(CONFIG_FILE)))?;
            let out = g.out.clone().unwrap_or_else(|| commands::default_estimate_path(speech));
            commands::estimate(&cfg, checkpoint, speech, &out, g.resample)
        }
        Command::AnalyzeRir { rir } => {
            let cfg = g.resolve_config(None)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
            commands::analyze(&cfg, rir, &out, g.resample)
        }
        Command::Evaluate { checkpoint, manifest } => {
            let cfg = g.resolve_config(Some(&checkpoint.join(CONFIG_FILE)))?;
            commands::evaluate(&cfg, checkpoint, manifest, g.out_dir()?, g.resample)
        }
    }
}
