//! Benchmark suites.
//!
//! `ti3d` and `nti3d` run compress, invert and both solve paths for the 3D
//! Laplace volume operator at each size. `scaling` times the dense apply of a
//! fixed-rank operator and the cross compression across sizes and fits
//! power laws to the timings.

use std::path::{Path, PathBuf};
use std::time::Instant;

use qttie::arith::{tt_matvec_compressed, tt_matvec_dense_into, MatvecWorkspace};
use qttie::compress::CompressionConfig;
use qttie::inverse::{invert, InverseConfig, InverseMode};
use qttie::kernels::{diric_rhs, Problem, ProblemSpec};
use qttie::tensor::TensorizationScheme;
use qttie::{TTOperator, TensorTrain};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::{compress_problem, compress_rhs, random_vector, relative_residual};
use crate::report::{BenchReport, CheckReport, Reporter, ScalingReport};
use crate::{BenchArgs, CliError, CliResult, CompressMethod, Outcome, Suite};

/// Largest points per axis the problem suites will invert.
pub const MAX_INVERT_POINTS: usize = 32;
/// Rank of the operator timed by the scaling suite.
pub const SCALING_RANK: usize = 4;
/// Minimum timed repetitions per matvec size; the fastest is reported.
const MATVEC_REPS: usize = 5;
const MATVEC_MIN_TOTAL_S: f64 = 0.2;
const DIRIC_NU: u32 = 10;

/// Slope of the least-squares line through `(ln n, ln t)`.
pub fn fit_exponent(n: &[f64], t: &[f64]) -> f64 {
    assert_eq!(n.len(), t.len());
    let k = n.len() as f64;
    let x: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn non_empty<T: Clone>(list: &Option<Vec<T>>, default: &[T], name: &str) -> CliResult<Vec<T>> {
    match list {
        Some(v) if v.is_empty() => Err(CliError::Usage(format!(
            "empty {name} list; pass a comma-separated list such as --{name} 8,16"
        ))),
        Some(v) => Ok(v.clone()),
        None => Ok(default.to_vec()),
    }
}

pub fn run(args: &BenchArgs, threads: usize) -> CliResult<Outcome> {
    let default_sizes: &[usize] = match args.suite {
        Suite::Scaling => &[8, 16, 32],
        _ => &[8, 16],
    };
    let sizes = non_empty(&args.sizes, default_sizes, "sizes")?;
    let eps = non_empty(&args.eps, &[1e-6], "eps")?;
    if let Some(bad) = sizes.iter().find(|&&n| !n.is_power_of_two() || n < 2) {
        return Err(CliError::Usage(format!("size {bad} is not a power of two >= 2")));
    }
    let reporter = Reporter::new(args.common.report.as_deref());
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.csv", suite_name(args.suite))));
    match args.suite {
        Suite::Ti3d | Suite::Nti3d => {
            let opts = CaseOptions {
                eps_p: args.eps_p,
                mode: args.mode.into(),
                seed: args.common.seed,
                threads,
            };
            problem_suite(args.suite, &sizes, &eps, &opts, &reporter, &out)
        }
        Suite::Scaling => {
            let depths = non_empty(&args.depths, &[12, 13, 14, 15, 16, 17, 18], "depths")?;
            scaling_suite(&sizes, &depths, eps[0], args.common.seed, threads, &reporter, &out)
        }
    }
}

fn suite_name(s: Suite) -> &'static str {
    match s {
        Suite::Ti3d => "ti3d",
        Suite::Nti3d => "nti3d",
        Suite::Scaling => "scaling",
    }
}

pub struct CaseOptions {
    pub eps_p: Option<f64>,
    pub mode: InverseMode,
    pub seed: u64,
    pub threads: usize,
}

fn spec_for(suite: Suite, points: usize) -> ProblemSpec {
    match suite {
        Suite::Nti3d => ProblemSpec::laplace_nti(points),
        _ => ProblemSpec::laplace_ti(points),
    }
}

/// Compress, invert and solve one problem. Failures are recorded in the
/// report's `error` field.
pub fn run_case(suite: Suite, points: usize, eps: f64, opts: &CaseOptions) -> BenchReport {
    let spec = spec_for(suite, points);
    let eps_p = opts.eps_p.unwrap_or(eps);
    let mut report = BenchReport {
        suite: suite_name(suite).into(),
        problem: match suite {
            Suite::Nti3d => "laplace3d-nti-gaussian".into(),
            _ => "laplace3d-ti".into(),
        },
        points_per_dim: points,
        n: spec.grid.len(),
        eps,
        eps_p,
        compress_time_s: 0.0,
        invert_time_s: 0.0,
        max_rank_forward: 0,
        max_rank_inverse: 0,
        inverse_memory_bytes: 0,
        solve_time_s: 0.0,
        qtt_solve_time_s: 0.0,
        rhs_max_rank: 0,
        achieved_residual: 0.0,
        inverse_converged: false,
        seed: opts.seed,
        threads: opts.threads,
        error: None,
    };
    if let Err(e) = fill_case(&spec, eps, eps_p, opts, &mut report) {
        log::warn!("{} case at {points}^3 failed: {e}", report.suite);
        report.error = Some(e.to_string());
    }
    report
}

fn fill_case(spec: &ProblemSpec, eps: f64, eps_p: f64, opts: &CaseOptions, report: &mut BenchReport) -> CliResult<()> {
    let problem = Problem::new(spec.clone())?;
    let cfg = CompressionConfig { seed: opts.seed, ..CompressionConfig::with_eps(eps) };
    let c = compress_problem(&problem, &cfg, CompressMethod::Cross)?;
    report.compress_time_s = c.time_s;
    report.max_rank_forward = c.operator.max_rank();
    if !c.converged {
        log::warn!("cross did not reach its validation threshold");
    }
    let a = c.operator;
    if spec.grid.points_per_dim > MAX_INVERT_POINTS {
        return Err(CliError::Usage(format!(
            "inversion is capped at {MAX_INVERT_POINTS} points per axis"
        )));
    }
    let icfg = InverseConfig { mode: opts.mode, seed: opts.seed, ..InverseConfig::with_eps(eps_p) };
    let start = Instant::now();
    let inv = invert(&a, &icfg)?;
    report.invert_time_s = start.elapsed().as_secs_f64();
    let x = inv.inverse;
    report.max_rank_inverse = x.max_rank();
    report.inverse_memory_bytes = x.train().payload_bytes();
    report.inverse_converged = inv.converged;

    let b = random_vector(a.rows(), opts.seed);
    let mut sol = Vec::new();
    let mut ws = MatvecWorkspace::default();
    let start = Instant::now();
    tt_matvec_dense_into(&x, &b, &mut sol, &mut ws)?;
    report.solve_time_s = start.elapsed().as_secs_f64();
    report.achieved_residual = relative_residual(&a, &sol, &b)?;

    let f = diric_rhs(&spec.grid, DIRIC_NU)?;
    let start = Instant::now();
    let ft = compress_rhs(&a, &f, eps)?;
    let _ = tt_matvec_compressed(&x, &ft, eps)?;
    report.qtt_solve_time_s = start.elapsed().as_secs_f64();
    report.rhs_max_rank = ft.max_rank();
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn problem_suite(
    suite: Suite,
    sizes: &[usize],
    eps: &[f64],
    opts: &CaseOptions,
    reporter: &Reporter,
    out: &Path,
) -> CliResult<Outcome> {
    // Warm-up on a tiny grid; not reported.
    let _ = run_case(suite, 4, eps[0], opts);
    let mut rows = Vec::new();
    for &e in eps {
        for &n in sizes {
            let r = run_case(suite, n, e, opts);
            reporter.emit(&r)?;
            rows.push(r);
        }
    }
    write_csv(out, &rows)?;
    let mut ok = rows.iter().all(|r| r.error.is_none() && r.inverse_converged);
    for &e in eps {
        let ranks: Vec<usize> = rows.iter().filter(|r| r.eps == e && r.error.is_none()).map(|r| r.max_rank_forward).collect();
        if ranks.len() < 2 {
            continue;
        }
        let worst = ranks.windows(2).map(|w| w[1] as f64 / w[0] as f64).fold(0.0, f64::max);
        let check = CheckReport {
            suite: suite_name(suite).into(),
            check: format!("forward rank growth between consecutive sizes at eps {e:e}"),
            value: worst,
            bound: "<= 1.2".into(),
            passed: worst <= 1.2,
        };
        ok &= check.passed;
        reporter.emit(&check)?;
    }
    Ok(Outcome::from_converged(ok))
}

/// A random operator with binary row and column modes and all interior
/// ranks equal to `rank`.
pub fn fixed_rank_operator(depth: usize, rank: usize, seed: u64) -> CliResult<TTOperator> {
    let scheme = TensorizationScheme::from_modes(vec![2; depth])?;
    let ranks: Vec<usize> = (0..=depth).map(|k| if k == 0 || k == depth { 1 } else { rank }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = TensorTrain::random(&vec![4; depth], &ranks, &mut rng)?;
    Ok(TTOperator::new(train, scheme)?)
}

/// Fastest of repeated dense applies, after one untimed run. Repeats until
/// `MATVEC_MIN_TOTAL_S` has elapsed, at least `MATVEC_REPS` times.
pub fn time_matvec(a: &TTOperator, seed: u64) -> CliResult<f64> {
    let x = random_vector(a.cols(), seed);
    let mut y = Vec::new();
    let mut ws = MatvecWorkspace::default();
    tt_matvec_dense_into(a, &x, &mut y, &mut ws)?;
    let (mut best, mut total, mut reps) = (f64::INFINITY, 0.0, 0);
    while reps < MATVEC_REPS || total < MATVEC_MIN_TOTAL_S {
        let start = Instant::now();
        tt_matvec_dense_into(a, &x, &mut y, &mut ws)?;
        let t = start.elapsed().as_secs_f64();
        best = best.min(t);
        total += t;
        reps += 1;
    }
    Ok(best)
}

/// Cross compression time of the translation-invariant Laplace operator.
pub fn time_compress(points: usize, eps: f64, seed: u64) -> CliResult<(f64, usize)> {
    let problem = Problem::new(ProblemSpec::laplace_ti(points))?;
    let cfg = CompressionConfig { seed, ..CompressionConfig::with_eps(eps) };
    let c = compress_problem(&problem, &cfg, CompressMethod::Cross)?;
    Ok((c.time_s, c.operator.max_rank()))
}

/// Fitted exponents must lie in these ranges.
pub const MATVEC_EXPONENT: (f64, f64) = (0.9, 1.3);
pub const COMPRESS_EXPONENT_MAX: f64 = 0.3;

fn scaling_suite(
    sizes: &[usize],
    depths: &[usize],
    eps: f64,
    seed: u64,
    threads: usize,
    reporter: &Reporter,
    out: &Path,
) -> CliResult<Outcome> {
    let mut rows = Vec::new();
    for &d in depths {
        let a = fixed_rank_operator(d, SCALING_RANK, seed)?;
        let t = time_matvec(&a, seed)?;
        rows.push(ScalingReport {
            suite: "scaling".into(),
            kernel: "matvec".into(),
            n: 1 << d,
            max_rank: SCALING_RANK,
            time_s: t,
            seed,
            threads,
        });
        reporter.emit(rows.last().expect("just pushed"))?;
    }
    let _ = time_compress(4, eps, seed)?;
    for &p in sizes {
        let (t, r) = time_compress(p, eps, seed)?;
        rows.push(ScalingReport {
            suite: "scaling".into(),
            kernel: "compress".into(),
            n: p * p * p,
            max_rank: r,
            time_s: t,
            seed,
            threads,
        });
        reporter.emit(rows.last().expect("just pushed"))?;
    }
    write_csv(out, &rows)?;
    let mut ok = true;
    for (kernel, lo, hi) in [("matvec", MATVEC_EXPONENT.0, MATVEC_EXPONENT.1), ("compress", f64::NEG_INFINITY, COMPRESS_EXPONENT_MAX)] {
        let (n, t): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.kernel == kernel).map(|r| (r.n as f64, r.time_s)).unzip();
        if n.len() < 2 {
            continue;
        }
        let p = fit_exponent(&n, &t);
        let check = CheckReport {
            suite: "scaling".into(),
            check: format!("{kernel} time exponent in N"),
            value: p,
            bound: if lo.is_finite() { format!("[{lo}, {hi}]") } else { format!("<= {hi}") },
            passed: (lo..=hi).contains(&p),
        };
        ok &= check.passed;
        reporter.emit(&check)?;
    }
    Ok(Outcome::from_converged(ok))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_exact_power_law() {
        let n = [8.0, 64.0, 512.0, 4096.0];
        let t: Vec<f64> = n.iter().map(|v: &f64| 3.0 * v.powf(1.15)).collect();
        assert!((fit_exponent(&n, &t) - 1.15).abs() < 1e-12);
        let flat = [2.0; 4];
        assert!(fit_exponent(&n, &flat).abs() < 1e-12);
    }

    #[test]
    fn fixed_rank_operator_shape() {
        let a = fixed_rank_operator(10, 3, 1).unwrap();
        assert_eq!(a.rows(), 1024);
        assert_eq!(a.max_rank(), 3);
    }
}
