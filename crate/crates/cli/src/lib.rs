//! Command-line front end: configuration, subcommands and exit codes.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
//! 3 a statistical check (`verify`) rejected the simulator.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

/// Default output directory when neither `--out` nor `out_dir` is given.
pub const OUT_DIR_ENV: &str = "CTSIR_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "ctsir", version, about = "Stochastic SIR epidemics with contact-tracing")]
pub struct Cli {
    /// Worker threads for replica-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (default: config `out_dir`, then $CTSIR_OUT_DIR, then `.`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate one path: events.jsonl and trajectory.csv.
    Simulate(SimulateArgs),
    /// Solve the deterministic limit: limit.csv.
    Limit(LimitArgs),
    /// Fluctuation report: fluct.csv (covariances over time) and fluct.json (z-scores).
    Fluct(FluctArgs),
    /// Maximum likelihood fit of the detection rates: fit.json.
    Fit(FitArgs),
    /// Simulator against the exact chain for constant weights: verify.json.
    Verify(VerifyArgs),
    /// Susceptible counts against their Poisson stationary law: stationary.json.
    Stationary(StationaryArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grid_step: Option<f64>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimitMethod {
    Convolution,
    Exponential,
}

#[derive(Args, Debug)]
pub struct LimitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, value_enum, default_value = "convolution")]
    pub method: LimitMethod,
}

#[derive(Args, Debug)]
pub struct FluctArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub h: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Event log written by `simulate`.
    #[arg(long, conflicts_with = "observed", required_unless_present = "observed")]
    pub log: Option<PathBuf>,
    /// Registry CSV with columns date, event_type[, infection_date].
    #[arg(long)]
    pub observed: Option<PathBuf>,
    /// Tracing model: A, B or C.
    #[arg(long)]
    pub model: String,
    /// Weight function, e.g. exp:0.01 (default: the log's own).
    #[arg(long)]
    pub psi: Option<String>,
    /// Also maximize numerically and report the gap to the closed form.
    #[arg(long)]
    pub newton: bool,
    /// Scale n for registry data.
    #[arg(long, default_value_t = 1)]
    pub n: u64,
    #[arg(long)]
    pub i0: Option<u64>,
    #[arg(long)]
    pub s0: Option<u64>,
    /// Date taken as time zero for registry data.
    #[arg(long)]
    pub origin: Option<String>,
    /// End of observation, in days after the origin.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// CSV of `date, susceptibles` targets.
    #[arg(long)]
    pub population: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub replicas: Option<u64>,
    /// Comparison time (default: the config horizon).
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub caps: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Smallest acceptable chi-square p-value.
    #[arg(long, default_value_t = 1e-3)]
    pub alpha: f64,
}

#[derive(Args, Debug)]
pub struct StationaryArgs {
    #[arg(long, default_value_t = 2.0)]
    pub lambda0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu0: f64,
    #[arg(long, default_value_t = 0)]
    pub s0: u64,
    #[arg(long, default_value_t = 50.0)]
    pub t: f64,
    #[arg(long, default_value_t = 5000)]
    pub replicas: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest single bin; larger counts share one tail bin.
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match commands::dispatch(&cli) {
        Ok(commands::Outcome::Passed) => EXIT_OK,
        Ok(commands::Outcome::CheckFailed) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<ctsir::Error>() {
        Some(inner) if inner.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}
