//! `ttd`: fit travel-time models and price travel-time derivatives.

mod commands;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ttd_core::ErrorClass;

pub use commands::{cmd_calibrate, cmd_fit, cmd_ingest, cmd_price, cmd_simulate};

/// Seeds are stored in TOML integers, which are signed 64-bit.
const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Parser)]
#[command(name = "ttd", version, about = "Travel-time derivative calibration and pricing")]
pub struct Cli {
    /// Worker threads for Monte Carlo and model selection (results do not
    /// depend on this).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a raw `timestamp,travel_time_min` CSV onto a uniform grid.
    Ingest(IngestArgs),
    /// Decompose a series, select an ARIMA model and fit its CARMA analogue.
    Fit(FitArgs),
    /// Price one contract from a model bundle.
    Price(PriceArgs),
    /// Imply the market price of risk from quoted prices.
    Calibrate(CalibrateArgs),
    /// Simulate the stochastic part of a bundle's model.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sampling interval, minutes.
    #[arg(long, default_value_t = 5.0)]
    pub h: f64,
    #[arg(long, default_value = "path")]
    pub path_id: String,
    /// Longest gap filled by interpolation, minutes.
    #[arg(long, default_value_t = 1440.0)]
    pub max_gap: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Series CSV (as written by `ingest`).
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model-selection table.
    #[arg(long)]
    pub diagnostics: PathBuf,
    /// Candidate orders `p,d,q` separated by spaces or semicolons.
    #[arg(long, default_value = "1,0,0;1,1,0;1,1,1;2,1,1")]
    pub candidates: String,
    /// CARMA autoregressive order (default: the selected ARIMA p).
    #[arg(long)]
    pub p_carma: Option<usize>,
    /// CARMA moving-average order (default: the selected ARIMA q).
    #[arg(long)]
    pub q_carma: Option<usize>,
    /// Fit only the daily seasonal block (series shorter than two weeks).
    #[arg(long)]
    pub daily_only: bool,
    #[arg(long, default_value_t = 5.0)]
    pub h: f64,
    #[arg(long, default_value = "path")]
    pub path_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriceMethod {
    Mc,
    Closed,
    Pde,
}

#[derive(Debug, Args)]
pub struct PriceArgs {
    pub bundle: PathBuf,
    /// Contract TOML file.
    pub contract: PathBuf,
    #[arg(long, value_enum, default_value_t = PriceMethod::Mc)]
    pub method: PriceMethod,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    pub seed: u64,
    /// Constant market price of risk.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true, conflicts_with = "measure")]
    pub theta: f64,
    /// Market-measure file (as written by `calibrate --measure-out`).
    #[arg(long)]
    pub measure: Option<PathBuf>,
    /// Annual risk-free rate, continuously compounded.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub rate: f64,
    /// Monte Carlo steps per sampling interval.
    #[arg(long, default_value_t = 1)]
    pub substeps: usize,
    /// Nodes per axis of the finite-difference grid.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrationMethod {
    Mc,
    Closed,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    pub bundle: PathBuf,
    /// Quotes CSV: contract columns plus `price`.
    pub quotes: PathBuf,
    #[arg(long, value_enum, default_value_t = CalibrationMethod::Mc)]
    pub method: CalibrationMethod,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    pub seed: u64,
    /// Annual risk-free rate, continuously compounded.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub rate: f64,
    /// Timestamps splitting a piecewise-constant theta, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub breaks: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also save the calibrated market measure.
    #[arg(long)]
    pub measure_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub bundle: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    pub seed: u64,
    /// Path CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary file; printed to stdout as well.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// The command line as recorded in outputs: program name plus arguments,
/// without `--workers`, which never changes results.
pub fn recorded_command(args: &[String]) -> String {
    let mut kept = vec!["ttd".to_string()];
    let mut skip = false;
    for a in args.iter().skip(1) {
        if skip {
            skip = false;
            continue;
        }
        if a == "--workers" {
            skip = true;
            continue;
        }
        if a.starts_with("--workers=") {
            continue;
        }
        kept.push(a.clone());
    }
    kept.join(" ")
}

/// Process exit status for an error: 2 input, 3 unsupported, 4 numerical.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let class = err
        .chain()
        .find_map(|e| e.downcast_ref::<ttd_core::Error>())
        .map(|e| e.class());
    match class {
        Some(ErrorClass::Unsupported) => 3,
        Some(ErrorClass::Numerical) => 4,
        Some(ErrorClass::Input) | None => 2,
    }
}

pub fn run(cli: Cli, command_line: String) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        anyhow::ensure!(n >= 1, "--workers must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a, &command_line),
        Command::Fit(a) => cmd_fit(&a, &command_line),
        Command::Price(a) => cmd_price(&a, &command_line),
        Command::Calibrate(a) => cmd_calibrate(&a, &command_line),
        Command::Simulate(a) => cmd_simulate(&a, &command_line),
    }
}
