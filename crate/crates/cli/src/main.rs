//! `flowcal`: fit a reference model, calibrate conditioning per resolution,
//! sample, and write diagnostic reports.

mod commands;
mod config;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Flags, RunConfig};
use workspace::Workspace;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("invalid artifact: {0}")]
    Artifact(String),
    #[error("output directory is locked by another run: {}", .0.display())]
    Busy(PathBuf),
    #[error(transparent)]
    Core(#[from] flowcal::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use flowcal::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Artifact(_) | CliError::Core(E::Invariant(_) | E::Parse(_)) => 3,
            CliError::Core(E::NonFinite(_)) => 4,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "flowcal", version, about = "Resolution-aware conditioning calibration for flow-matching samplers")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the Wiener model at the reference resolution.
    Fit,
    /// Calibrate conditioning for every evaluation resolution.
    Calibrate,
    /// Draw samples at one resolution.
    Sample {
        #[arg(long)]
        resolution: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Use the default conditioning instead of the calibration table.
        #[arg(long)]
        no_table: bool,
    },
    /// Write SSIM, reverse-MSE, conditioning and FD reports.
    Diagnose,
    /// Summarize tables and reports as markdown.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Calibrate => "calibrate",
            Command::Sample { .. } => "sample",
            Command::Diagnose => "diagnose",
            Command::Report => "report",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let flags = Flags { seed: cli.seed, out: cli.out };
    let cfg = RunConfig::load(cli.config.as_deref(), |k| std::env::var(k).ok(), &flags)?;
    let ws = Workspace::new(&cfg.output_dir);
    let _lock = ws.lock()?;
    match &cli.command {
        Command::Fit => commands::fit(&cfg, &ws)?,
        Command::Calibrate => commands::calibrate(&cfg, &ws)?,
        Command::Sample { resolution, n, no_table } => commands::sample(&cfg, &ws, *resolution, *n, !no_table)?,
        Command::Diagnose => commands::diagnose(&cfg, &ws)?,
        Command::Report => commands::report(&cfg, &ws)?,
    }
    ws.record(cli.command.name(), &cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowcal: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
