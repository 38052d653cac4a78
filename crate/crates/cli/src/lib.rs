//! Command-line driver: compress, invert and apply volume integral operators
//! in QTT form, and run the benchmark suites.

pub mod bench;
pub mod commands;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faer::Par;
use qttie::inverse::InverseMode;
use qttie::QttError;
use thiserror::Error;

/// Environment variable capping kernel parallelism.
pub const THREADS_ENV: &str = "QTTIE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] QttError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// How a command finished when it did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Done => 0,
            Outcome::NotConverged => 2,
        }
    }

    pub fn from_converged(converged: bool) -> Self {
        if converged {
            Outcome::Done
        } else {
            Outcome::NotConverged
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qttie", version, about = "QTT compression, inversion and solves for volume integral equations")]
pub struct Cli {
    /// Log sweep reports and solver progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress the operator of a problem spec into a TTB1 file.
    Compress(CompressArgs),
    /// Compute an approximate inverse of a TTB1 operator.
    Invert(InvertArgs),
    /// Solve with a precomputed inverse, or with GMRES.
    Solve(SolveArgs),
    /// Run a benchmark suite.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append JSON report lines to this file (they always go to stdout too).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompressMethod {
    /// Dense TT-SVD when the matrix fits the assembly limit, cross otherwise.
    Auto,
    Cross,
    Svd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Als,
    Dmrg,
    Amen,
}

impl From<ModeArg> for InverseMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Als => InverseMode::Als,
            ModeArg::Dmrg => InverseMode::Dmrg,
            ModeArg::Amen => InverseMode::DmrgPlusEnrich,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Problem spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = CompressMethod::Auto)]
    pub method: CompressMethod,
    #[arg(long)]
    pub max_rank: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Operator to invert (TTB1).
    pub operator: PathBuf,
    #[arg(long = "eps-p", default_value_t = 1e-6)]
    pub eps_p: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Dmrg)]
    pub mode: ModeArg,
    /// Right preconditioner M (TTB1); the output is then the product M Y.
    #[arg(long)]
    pub precond: Option<PathBuf>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long)]
    pub max_rank: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// System operator A (TTB1).
    pub operator: PathBuf,
    /// Approximate inverse X (TTB1); without it the system is solved by GMRES.
    #[arg(long)]
    pub inverse: Option<PathBuf>,
    /// GMRES right preconditioner (TTB1).
    #[arg(long)]
    pub precond: Option<PathBuf>,
    /// `diric`, `random`, or a file holding a TTB1 vector or raw little-endian f64 values.
    #[arg(long, default_value = "random")]
    pub rhs: String,
    /// Accuracy used to compress the right-hand side and round the
    /// compressed product.
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Spec of the problem; needed only for its grid when the operator's
    /// modes are ambiguous.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Spatial dimension assumed for `diric` when no spec is given.
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    #[arg(long, default_value_t = 10)]
    pub nu: u32,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long)]
    pub restart: Option<usize>,
    /// Solution as raw little-endian f64 values in scheme order.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Ti3d,
    Nti3d,
    Scaling,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub suite: Suite,
    /// Comma-separated points per axis (e.g. `8,16`).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub sizes: Option<Vec<usize>>,
    /// Comma-separated compression accuracies.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub eps: Option<Vec<f64>>,
    /// Inversion accuracy; defaults to each compression accuracy.
    #[arg(long = "eps-p")]
    pub eps_p: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Dmrg)]
    pub mode: ModeArg,
    /// Depths of the fixed-rank operator timed by the scaling suite.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub depths: Option<Vec<usize>>,
    /// Aggregate CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Number of kernel threads from `QTTIE_THREADS`, defaulting to the
/// available parallelism.
pub fn thread_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                log::warn!("ignoring {THREADS_ENV}={v:?}; expected a positive integer");
                avail
            }
        },
        Err(_) => avail,
    }
}

pub fn configure_threads() -> usize {
    let n = thread_count();
    faer::set_global_parallelism(if n <= 1 { Par::Seq } else { Par::rayon(n) });
    n
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    let threads = configure_threads();
    match cli.command {
        Command::Compress(a) => commands::compress(&a, threads),
        Command::Invert(a) => commands::invert(&a, threads),
        Command::Solve(a) => commands::solve(&a, threads),
        Command::Bench(a) => bench::run(&a, threads),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
