//! Library behind the `samba` command-line tool.
//!
//! Exit codes: 0 on success, 2 for usage, configuration, schema and I/O
//! problems, 3 when training or inference hits a non-finite value.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use samba_core::checkpoint::CheckpointError;
use samba_core::data::DataError;
use samba_core::train::TrainError;
use samba_core::TensorError;
use thiserror::Error;

pub use config::RunConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SAMBA_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Tensor(t) => CliError::Tensor(t),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "samba", version, about = "Train and inspect SAMBA return forecasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, window, split, scale and train; writes the checkpoint and history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics and predictions over the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicted return for the trading day `--date`, from the L rows before it.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        date: String,
    },
    /// Writes the learned adjacency and a degree ranking of the features.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Sizes the global worker pool from `SAMBA_THREADS`, if set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            config,
            seed,
            epochs,
            lr,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(epochs) = epochs {
                cfg.epochs = epochs;
            }
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            if let Some(out) = out {
                cfg.out = out;
            }
            commands::train(&cfg)
        }
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data, out.as_deref()),
        Command::Predict { checkpoint, data, date } => commands::predict(&checkpoint, &data, &date),
        Command::ExportGraph { checkpoint, out } => commands::export_graph(&checkpoint, out.as_deref()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
