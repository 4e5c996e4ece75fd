//! `timeseed`: mean-field runs, finite-size spectra, parameter sweeps and
//! critical-coupling searches from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 resource cap exceeded.

mod commands;
mod config;
mod presets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::presets::Preset;

#[derive(Debug, Parser)]
#[command(name = "timeseed", version, about = "Seeding and synchronisation of coupled time crystals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the mean-field equations and write the trajectory as CSV.
    Simulate(SimulateArgs),
    /// Slow Liouvillian spectrum along a ladder of atom numbers.
    Spectrum(SpectrumArgs),
    /// Evaluate a metric over a one- or two-axis parameter grid.
    Sweep(SweepArgs),
    /// Critical coupling from the closed form and from bisection.
    Crit(CritArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Output file. Standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Coupling strength, replacing the configured one.
    #[arg(long)]
    pub coupling: Option<f64>,
    /// Initial Bloch vectors as `x,y,z;x,y,z;...`.
    #[arg(long, allow_hyphen_values = true)]
    pub seed_override: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub dt_out: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub common: Common,
    /// Even total atom numbers, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "full")]
    pub sizes: Option<Vec<usize>>,
    /// The long ladder N = 6, 10, ..., 38. Slow.
    #[arg(long)]
    pub full: bool,
    /// Fit and extrapolate Re λ₁ and Im λ₁ in powers of 1/N.
    #[arg(long)]
    pub fit: bool,
    /// Compare the dense and iterative solvers on every size within the dense cap.
    #[arg(long)]
    pub cross_check: bool,
    /// Also write the Liouvillian of the smallest size in coordinate format.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Continue a partially written grid file.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    pub resume: Option<PathBuf>,
    /// Checkpoints written to `--out` over the course of the run.
    #[arg(long, default_value_t = 20)]
    pub checkpoints: usize,
}

#[derive(Debug, Args)]
pub struct CritArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Spectrum(a) => commands::spectrum(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Crit(a) => commands::crit(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("timeseed: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use timeseed_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::DimensionMismatch { .. }
                | E::InvalidArgument(_)
                | E::Unsupported(_)
                | E::OutOfDomain(_)
                | E::InvalidBracket(_)
                | E::Format(_)
                | E::Io(_) => 2,
                E::BudgetExhausted { .. } | E::Numerical(_) | E::Solver(_) => 3,
                E::Resource(_) => 4,
            },
            CliError::CrossCheck(_) => 3,
        }
    }
}
