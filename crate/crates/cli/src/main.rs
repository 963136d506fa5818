//! `dtm`: train, evaluate and export deep transformation models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! divergence (including benchmark folds that failed), 1 anything else.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtm::checkpoint::CheckpointError;
use dtm::data::DataError;
use dtm::eval::EvalError;
use dtm::flow::FlowError;
use dtm::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Diverged(_) => 4,
            Self::Io(_) | Self::Other(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::UnknownGenerator(_) => Self::Config(vec![e.to_string()]),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::InvalidConfig(_) => Self::Config(vec![e.to_string()]),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(problems) => Self::Config(problems),
            TrainError::Diverged(_) | TrainError::NonFiniteLoss(..) => {
                Self::Diverged(e.to_string())
            }
            TrainError::NonFiniteSample { .. } | TrainError::EmptyBatch => {
                Self::Data(e.to_string())
            }
            TrainError::Flow(f) => f.into(),
            TrainError::Log(io) => Self::Io(io.to_string()),
            _ => Self::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => d.into(),
            EvalError::Flow(f) => f.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Io { .. } => Self::Io(e.to_string()),
            EvalError::GridPoints(_) => Self::Config(vec![e.to_string()]),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match &e {
            CheckpointError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
                Self::Io(e.to_string())
            }
            _ => Self::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dtm",
    version,
    about = "Deep transformation models for conditional densities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the config-driven commands.
#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set model.order=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for both model initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set to CSV.
    GenToy {
        /// sinusoidal, bimodal or heteroscedastic.
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model on all rows; writes checkpoint, training log and manifest.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Score a checkpoint on data, per fold or on all rows.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        args: ConfigArgs,
        /// Data CSV (shorthand for `--set data.path=...`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Target column (shorthand for `--set data.target=...`).
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        folds_dir: Option<PathBuf>,
    },
    /// Export conditional densities, CDFs and quantiles at given inputs.
    PredictCpd {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated raw input row; repeatable.
        #[arg(long = "x", value_name = "X1,X2,...", required = true)]
        rows: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated quantile levels.
        #[arg(long, default_value = "0.05,0.5,0.95")]
        quantiles: String,
        #[arg(long, default_value_t = dtm::eval::DEFAULT_GRID_POINTS)]
        points: usize,
        /// Requested grid range `lo,hi` on the original scale.
        #[arg(long)]
        range: Option<String>,
    },
    /// Train and score one fresh model per fold.
    Benchmark {
        #[command(flatten)]
        args: ConfigArgs,
        /// Folds to run in parallel.
        #[arg(long)]
        jobs: Option<usize>,
        /// Directory (or file) of fold index lists.
        #[arg(long)]
        folds_dir: Option<PathBuf>,
        /// Comma-separated quantile levels recorded in the config.
        #[arg(long)]
        quantiles: Option<String>,
    },
    /// Compare analytic gradients with central differences for a fresh model.
    GradCheck {
        #[command(flatten)]
        args: ConfigArgs,
        /// Rows of data used for the loss.
        #[arg(long, default_value_t = 8)]
        rows: usize,
        /// Standard deviation of a random perturbation of the parameters.
        #[arg(long, default_value_t = 0.1)]
        jitter: f64,
    },
}

impl ConfigArgs {
    fn overrides(&self) -> config::Overrides {
        config::Overrides {
            sets: self.sets.clone(),
            seed: self.seed,
            out: self.out.clone(),
            ..Default::default()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenToy { name, n, seed, out } => commands::gen_toy(&name, n, seed, &out),
        Command::Train { args } => commands::train(args.config.as_deref(), &args.overrides()),
        Command::Evaluate {
            checkpoint,
            args,
            data,
            target,
            folds_dir,
        } => {
            let mut o = args.overrides();
            if let Some(d) = data {
                o.sets.push(format!(
                    "data.path={}",
                    serde_json::to_string(&d).expect("path")
                ));
            }
            if let Some(t) = target {
                o.sets
                    .push(format!("data.target={}", serde_json::Value::String(t)));
            }
            o.folds_dir = folds_dir;
            commands::evaluate(&checkpoint, args.config.as_deref(), &o)
        }
        Command::PredictCpd {
            checkpoint,
            rows,
            out,
            quantiles,
            points,
            range,
        } => commands::predict_cpd(
            &checkpoint,
            &rows,
            &out,
            &quantiles,
            points,
            range.as_deref(),
        ),
        Command::Benchmark {
            args,
            jobs,
            folds_dir,
            quantiles,
        } => {
            let mut o = args.overrides();
            o.jobs = jobs;
            o.folds_dir = folds_dir;
            if let Some(q) = quantiles {
                o.quantiles = Some(
                    config::parse_quantiles(&q)
                        .map_err(|e| CliError::Config(vec![format!("--quantiles: {e}")]))?,
                );
            }
            commands::benchmark(args.config.as_deref(), &o)
        }
        Command::GradCheck { args, rows, jitter } => {
            commands::grad_check(args.config.as_deref(), &args.overrides(), rows, jitter)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
