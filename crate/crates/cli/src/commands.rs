//! The `compress`, `invert` and `solve` commands and the helpers they share
//! with the benchmark suites.

use std::fs;
use std::path::Path;
use std::time::Instant;

use qttie::arith::{tt_matvec_compressed, tt_matvec_dense_into, MatvecWorkspace};
use qttie::compress::{compress_matrix, compress_vector, CompressionConfig};
use qttie::cross::tt_cross;
use qttie::inverse::{invert_preconditioned, InverseConfig, InverseMode, SweepReport};
use qttie::kernels::{diric_rhs, GridSpec, Problem, ProblemSpec, DENSE_ASSEMBLY_LIMIT};
use qttie::krylov::{gmres, GmresConfig};
use qttie::tensor::io::{self, TtFile};
use qttie::{TTOperator, TTVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::{CompressReport, InvertReport, Reporter, SolveReport};
use crate::{CliError, CliResult, CompressArgs, CompressMethod, InvertArgs, Outcome, SolveArgs};

pub fn load_spec(path: &Path) -> CliResult<ProblemSpec> {
    Ok(ProblemSpec::from_json(&fs::read_to_string(path)?)?)
}

pub fn load_operator(path: &Path) -> CliResult<TTOperator> {
    Ok(io::load(path)?.into_operator()?)
}

/// A compressed operator together with what the compression reported.
pub struct Compressed {
    pub operator: TTOperator,
    pub method: CompressMethod,
    pub converged: bool,
    pub validation_error: Option<f64>,
    pub sweeps: Option<usize>,
    pub evaluations: Option<u64>,
    pub time_s: f64,
}

/// Compresses the operator of `problem`, by dense TT-SVD or by cross.
pub fn compress_problem(problem: &Problem, cfg: &CompressionConfig, method: CompressMethod) -> CliResult<Compressed> {
    let method = match method {
        CompressMethod::Auto if problem.len() <= DENSE_ASSEMBLY_LIMIT => CompressMethod::Svd,
        CompressMethod::Auto => CompressMethod::Cross,
        m => m,
    };
    let start = Instant::now();
    let out = match method {
        CompressMethod::Svd => {
            let m = problem.dense_assemble()?;
            let operator = compress_matrix(m.as_ref(), problem.scheme(), cfg)?;
            Compressed {
                operator,
                method,
                converged: true,
                validation_error: None,
                sweeps: None,
                evaluations: None,
                time_s: 0.0,
            }
        }
        _ => {
            let res = tt_cross(&problem.oracle(), cfg)?;
            Compressed {
                operator: TTOperator::new(res.train, problem.scheme().clone())?,
                method,
                converged: res.converged,
                validation_error: Some(res.validation_error),
                sweeps: Some(res.sweeps),
                evaluations: Some(res.evaluations),
                time_s: 0.0,
            }
        }
    };
    Ok(Compressed { time_s: start.elapsed().as_secs_f64(), ..out })
}

fn method_name(m: CompressMethod) -> &'static str {
    match m {
        CompressMethod::Auto => "auto",
        CompressMethod::Cross => "cross",
        CompressMethod::Svd => "svd",
    }
}

pub fn mode_name(m: InverseMode) -> &'static str {
    match m {
        InverseMode::Als => "als",
        InverseMode::Dmrg => "dmrg",
        InverseMode::DmrgPlusEnrich => "amen",
    }
}

pub fn compress(args: &CompressArgs, threads: usize) -> CliResult<Outcome> {
    let spec = load_spec(&args.spec)?;
    let problem = Problem::new(spec)?;
    let mut cfg = CompressionConfig { seed: args.common.seed, ..CompressionConfig::with_eps(args.eps) };
    if let Some(r) = args.max_rank {
        cfg.max_rank = r;
    }
    let c = compress_problem(&problem, &cfg, args.method)?;
    io::save_operator(&args.out, &c.operator)?;
    let report = CompressReport {
        command: "compress".into(),
        n: problem.len(),
        method: method_name(c.method).into(),
        eps: args.eps,
        ranks: c.operator.ranks(),
        max_rank_forward: c.operator.max_rank(),
        payload_bytes: c.operator.train().payload_bytes(),
        converged: c.converged,
        validation_error: c.validation_error,
        sweeps: c.sweeps,
        evaluations: c.evaluations,
        compress_time_s: c.time_s,
        seed: args.common.seed,
        threads,
    };
    Reporter::new(args.common.report.as_deref()).emit(&report)?;
    Ok(Outcome::from_converged(c.converged))
}

pub fn invert(args: &InvertArgs, threads: usize) -> CliResult<Outcome> {
    let a = load_operator(&args.operator)?;
    if !a.scheme().is_square() {
        return Err(CliError::Usage(format!("operator is {} x {}, not square", a.rows(), a.cols())));
    }
    let mut cfg = InverseConfig {
        mode: args.mode.into(),
        seed: args.common.seed,
        ..InverseConfig::with_eps(args.eps_p)
    };
    if let Some(s) = args.max_sweeps {
        cfg.max_sweeps = s;
    }
    if let Some(r) = args.max_rank {
        cfg.max_rank = r;
    }
    let start = Instant::now();
    let (x, residual, converged, reports): (TTOperator, f64, bool, Vec<SweepReport>) = match &args.precond {
        None => {
            let res = qttie::inverse::invert(&a, &cfg)?;
            (res.inverse, res.residual, res.converged, res.reports)
        }
        Some(p) => {
            let m = load_operator(p)?.with_scheme(a.scheme().clone())?;
            let res = invert_preconditioned(&a, &m, &cfg)?;
            (res.fused(args.eps_p / 10.0)?, res.residual, res.converged, res.reports)
        }
    };
    let time = start.elapsed().as_secs_f64();
    io::save_operator(&args.out, &x)?;
    let report = InvertReport {
        command: "invert".into(),
        n: a.rows(),
        eps_p: args.eps_p,
        mode: mode_name(cfg.mode).into(),
        preconditioned: args.precond.is_some(),
        ranks: x.ranks(),
        max_rank_inverse: x.max_rank(),
        inverse_memory_bytes: x.train().payload_bytes(),
        residual,
        converged,
        sweeps: reports.len(),
        invert_time_s: time,
        seed: args.common.seed,
        threads,
    };
    Reporter::new(args.common.report.as_deref()).emit(&report)?;
    Ok(Outcome::from_converged(converged))
}

/// Recovers a regular grid from operator modes: binary modes after an
/// optional leaf mode of `2^leaf_bits`, bits split evenly over `dims` axes.
pub fn grid_from_modes(modes: &[usize], dims: usize) -> CliResult<GridSpec> {
    let bad = || CliError::Usage(format!("modes {modes:?} do not describe a {dims}-dimensional binary grid"));
    if dims == 0 || modes.is_empty() || modes.iter().any(|m| !m.is_power_of_two()) || modes[1..].iter().any(|&m| m != 2) {
        return Err(bad());
    }
    let leaf_bits = modes[0].trailing_zeros() as usize;
    let bits = leaf_bits + modes.len() - 1;
    if leaf_bits == 0 || !bits.is_multiple_of(dims) {
        return Err(bad());
    }
    Ok(GridSpec { dims, points_per_dim: 1 << (bits / dims), leaf_bits })
}

/// Uniform entries in `[-1, 1)`.
pub fn random_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `||A x - b|| / ||b||`.
pub fn relative_residual(a: &TTOperator, x: &[f64], b: &[f64]) -> CliResult<f64> {
    let mut ax = Vec::new();
    tt_matvec_dense_into(a, x, &mut ax, &mut MatvecWorkspace::default())?;
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    Ok(r / norm(b))
}

fn read_vector_file(path: &Path) -> CliResult<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"TTB1") {
        let v = match io::decode(&bytes)? {
            TtFile::Vector(v) => v,
            TtFile::Operator(_) => return Err(CliError::Usage(format!("{} holds an operator, not a vector", path.display()))),
        };
        return Ok(v.to_vec()?);
    }
    if bytes.len() % 8 != 0 {
        return Err(CliError::Usage(format!("{} is not a whole number of f64 values", path.display())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

pub fn write_vector_file(path: &Path, x: &[f64]) -> CliResult<()> {
    let bytes: Vec<u8> = x.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn build_rhs(args: &SolveArgs, a: &TTOperator) -> CliResult<Vec<f64>> {
    let n = a.cols();
    let b = match args.rhs.as_str() {
        "random" => random_vector(n, args.common.seed),
        "diric" => {
            let grid = match &args.spec {
                Some(p) => load_spec(p)?.grid,
                None => grid_from_modes(&a.col_modes(), args.dims)?,
            };
            if grid.scheme()?.vector_modes() != a.col_modes().as_slice() {
                return Err(CliError::Usage(format!(
                    "grid with modes {:?} does not match operator modes {:?}",
                    grid.scheme()?.vector_modes(),
                    a.col_modes()
                )));
            }
            diric_rhs(&grid, args.nu)?
        }
        file => read_vector_file(Path::new(file))?,
    };
    if b.len() != n {
        return Err(CliError::Usage(format!("right-hand side has {} entries, operator has {n} columns", b.len())));
    }
    Ok(b)
}

pub fn solve(args: &SolveArgs, threads: usize) -> CliResult<Outcome> {
    let a = load_operator(&args.operator)?;
    if !a.scheme().is_square() {
        return Err(CliError::Usage(format!("operator is {} x {}, not square", a.rows(), a.cols())));
    }
    let n = a.rows();
    let b = build_rhs(args, &a)?;
    let mut report = SolveReport {
        command: "solve".into(),
        n,
        rhs: args.rhs.clone(),
        method: String::new(),
        eps: args.eps,
        solve_time_s: 0.0,
        qtt_solve_time_s: None,
        rhs_max_rank: None,
        solution_max_rank: None,
        achieved_residual: 0.0,
        qtt_residual: None,
        iterations: None,
        converged: true,
        seed: args.common.seed,
        threads,
    };
    let x = match &args.inverse {
        Some(p) => {
            let inv = load_operator(p)?;
            if inv.row_modes() != a.col_modes() || inv.col_modes() != a.row_modes() {
                return Err(CliError::Usage(format!(
                    "inverse modes {:?} x {:?} do not match the operator",
                    inv.row_modes(),
                    inv.col_modes()
                )));
            }
            report.method = "inverse".into();
            let start = Instant::now();
            let mut x = Vec::new();
            tt_matvec_dense_into(&inv, &b, &mut x, &mut MatvecWorkspace::default())?;
            report.solve_time_s = start.elapsed().as_secs_f64();

            let start = Instant::now();
            let bt = compress_rhs(&a, &b, args.eps)?;
            let xt = tt_matvec_compressed(&inv, &bt, args.eps)?;
            report.qtt_solve_time_s = Some(start.elapsed().as_secs_f64());
            report.rhs_max_rank = Some(bt.max_rank());
            report.solution_max_rank = Some(xt.max_rank());
            report.qtt_residual = Some(relative_residual(&a, &xt.to_vec()?, &b)?);
            x
        }
        None => {
            report.method = "gmres".into();
            let m = args
                .precond
                .as_deref()
                .map(|p| load_operator(p).and_then(|m| Ok(m.with_scheme(a.scheme().clone())?)))
                .transpose()?;
            let cfg = GmresConfig {
                tol: args.tol,
                max_iters: args.max_iters,
                restart: args.restart,
                record_history: false,
            };
            let start = Instant::now();
            let res = gmres_with_tt(&a, m.as_ref(), &b, &cfg)?;
            report.solve_time_s = start.elapsed().as_secs_f64();
            report.iterations = Some(res.iterations);
            report.converged = res.converged;
            res.solution
        }
    };
    report.achieved_residual = relative_residual(&a, &x, &b)?;
    if let Some(p) = &args.out {
        write_vector_file(p, &x)?;
    }
    Reporter::new(args.common.report.as_deref()).emit(&report)?;
    Ok(Outcome::from_converged(report.converged))
}

/// GMRES on a TT operator with an optional TT right preconditioner, both
/// applied densely.
pub fn gmres_with_tt(
    a: &TTOperator,
    m: Option<&TTOperator>,
    b: &[f64],
    cfg: &GmresConfig,
) -> CliResult<qttie::krylov::SolveResult> {
    let mut ws = MatvecWorkspace::default();
    let mut buf = Vec::new();
    let mut apply_a = |x: &[f64], y: &mut [f64]| {
        tt_matvec_dense_into(a, x, &mut buf, &mut ws).expect("sizes checked");
        y.copy_from_slice(&buf);
    };
    let res = match m {
        Some(m) => {
            if m.rows() != a.cols() || m.cols() != a.rows() {
                return Err(CliError::Usage("preconditioner size does not match the operator".into()));
            }
            let mut ws_m = MatvecWorkspace::default();
            let mut buf_m = Vec::new();
            let mut apply_m = |x: &[f64], y: &mut [f64]| {
                tt_matvec_dense_into(m, x, &mut buf_m, &mut ws_m).expect("sizes checked");
                y.copy_from_slice(&buf_m);
            };
            gmres(&mut apply_a, b, cfg, Some(&mut apply_m))?
        }
        None => gmres(&mut apply_a, b, cfg, None)?,
    };
    Ok(res)
}

/// Compresses `b` at `eps` (TT-SVD of the dense vector) in the operator's
/// column modes.
pub fn compress_rhs(a: &TTOperator, b: &[f64], eps: f64) -> CliResult<TTVector> {
    Ok(compress_vector(b, &a.col_modes(), &CompressionConfig::with_eps(eps))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_recovered_from_modes() {
        let g = GridSpec { dims: 3, points_per_dim: 16, leaf_bits: 2 };
        let modes = g.scheme().unwrap().vector_modes().to_vec();
        assert_eq!(grid_from_modes(&modes, 3).unwrap(), g);
        assert!(grid_from_modes(&[2, 2, 2, 2], 3).is_err());
        assert!(grid_from_modes(&[3, 2], 1).is_err());
    }

    #[test]
    fn random_vector_is_seeded() {
        assert_eq!(random_vector(10, 4), random_vector(10, 4));
        assert_ne!(random_vector(10, 4), random_vector(10, 5));
        assert!(random_vector(1000, 1).iter().all(|v| (-1.0..1.0).contains(v)));
    }
}
