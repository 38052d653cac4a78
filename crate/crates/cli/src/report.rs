//! Report records. Each is printed as one JSON object per line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressReport {
    pub command: String,
    pub n: usize,
    pub method: String,
    pub eps: f64,
    pub ranks: Vec<usize>,
    pub max_rank_forward: usize,
    pub payload_bytes: usize,
    pub converged: bool,
    /// Sampled relative RMS error of the cross approximation.
    pub validation_error: Option<f64>,
    pub sweeps: Option<usize>,
    pub evaluations: Option<u64>,
    pub compress_time_s: f64,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertReport {
    pub command: String,
    pub n: usize,
    pub eps_p: f64,
    pub mode: String,
    pub preconditioned: bool,
    pub ranks: Vec<usize>,
    pub max_rank_inverse: usize,
    pub inverse_memory_bytes: usize,
    /// Estimated `||A X - I||_F / sqrt(N)`.
    pub residual: f64,
    pub converged: bool,
    pub sweeps: usize,
    pub invert_time_s: f64,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub command: String,
    pub n: usize,
    pub rhs: String,
    /// `inverse` or `gmres`.
    pub method: String,
    pub eps: f64,
    /// Dense apply of the inverse, or the whole GMRES solve.
    pub solve_time_s: f64,
    /// Right-hand side compression plus compressed apply.
    pub qtt_solve_time_s: Option<f64>,
    pub rhs_max_rank: Option<usize>,
    pub solution_max_rank: Option<usize>,
    /// `||A x - b|| / ||b||` of the dense solution.
    pub achieved_residual: f64,
    /// The same for the solution of the compressed path.
    pub qtt_residual: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: bool,
    pub seed: u64,
    pub threads: usize,
}

/// One row of the `ti3d` and `nti3d` suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suite: String,
    /// Kernel and coefficients, e.g. `laplace3d-ti`.
    pub problem: String,
    pub points_per_dim: usize,
    pub n: usize,
    pub eps: f64,
    pub eps_p: f64,
    pub compress_time_s: f64,
    pub invert_time_s: f64,
    pub max_rank_forward: usize,
    pub max_rank_inverse: usize,
    pub inverse_memory_bytes: usize,
    /// Dense apply of the inverse to a random right-hand side.
    pub solve_time_s: f64,
    /// diric right-hand side compression plus compressed apply.
    pub qtt_solve_time_s: f64,
    pub rhs_max_rank: usize,
    pub achieved_residual: f64,
    pub inverse_converged: bool,
    pub seed: u64,
    pub threads: usize,
    /// Set when the case failed; the numeric fields are then zero.
    pub error: Option<String>,
}

/// One timing of the scaling suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub suite: String,
    /// `matvec` (dense apply of a fixed-rank operator) or `compress` (cross).
    pub kernel: String,
    pub n: usize,
    pub max_rank: usize,
    pub time_s: f64,
    pub seed: u64,
    pub threads: usize,
}

/// Outcome of a shape check over a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub suite: String,
    pub check: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

/// Prints report lines to stdout and appends them to an optional file.
pub struct Reporter {
    path: Option<PathBuf>,
}

impl Reporter {
    pub fn new(path: Option<&Path>) -> Self {
        Self { path: path.map(Path::to_path_buf) }
    }

    pub fn emit<T: Serialize>(&self, record: &T) -> CliResult<()> {
        let line = serde_json::to_string(record)?;
        println!("{line}");
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}
