//! `dtg`: synthesize cohorts, train, generate twins and evaluate them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use dtg_core::checkpoint::CheckpointError;
use dtg_core::datamodel::DataError;
use dtg_core::evaluation::EvalError;
use dtg_core::nbm::{GenerationMode, NbmError};
use dtg_core::synth::SynthError;
use dtg_core::training::TrainError;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::GradCheck(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<NbmError> for CliError {
    fn from(e: NbmError) -> Self {
        match e {
            NbmError::ZeroSteps | NbmError::BadTimes => CliError::Config(e.to_string()),
            NbmError::NoBaseline(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Net(_) => CliError::Config(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Nbm(n) => n.into(),
            TrainError::NonFinite { .. } | TrainError::Diff(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => CliError::Config(m),
            EvalError::Data(d) => d.into(),
            EvalError::Nbm(n) => n.into(),
            EvalError::Train { fold, source } => match CliError::from(source) {
                CliError::Config(m) => CliError::Config(format!("fold {fold}: {m}")),
                CliError::Data(m) => CliError::Data(format!("fold {fold}: {m}")),
                CliError::Numeric(m) => CliError::Numeric(format!("fold {fold}: {m}")),
                CliError::GradCheck(m) => CliError::GradCheck(m),
            },
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Net(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dtg",
    version,
    about = "Digital twin generator for longitudinal records"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint to read (or write, for `train`).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Comma-separated horizons, e.g. "1,3,6,12".
    #[arg(long, global = true)]
    times: Option<String>,
    /// Samples per patient.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Cross-validation fold.
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// `rollout` or `direct`.
    #[arg(long, global = true)]
    mode: Option<GenerationMode>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic OU cohort as CSV plus its schema.
    Synth,
    /// Train a model and write the checkpoint and telemetry.
    Train,
    /// Draw twins for every patient.
    Generate,
    /// Compute the evaluation report.
    Evaluate,
    /// Finite-difference check of every network and loss.
    Gradcheck,
    /// Per-patient table of twin mean ± std per variable and horizon.
    TwinRecord,
}

fn parse_times(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Config(format!("--times: `{t}`: {e}")))
        })
        .collect()
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &cli.model {
        cfg.model = Some(m.clone());
    }
    if let Some(t) = &cli.times {
        cfg.times = parse_times(t)?;
    }
    if let Some(s) = cli.samples {
        cfg.samples = s;
    }
    if let Some(f) = cli.fold {
        cfg.fold = Some(f);
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DTG_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!("DTG_THREADS must be a positive integer, got `{v}`"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = resolve(cli)?;
    cfg.seed()?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Generate => commands::generate(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::TwinRecord => commands::twin_record(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
