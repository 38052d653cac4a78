//! GMRES with optional right preconditioning.

use serde::{Deserialize, Serialize};

use crate::error::{QttError, Result};

/// Orthogonality loss (largest `|v_i . w| / |w|` after one Gram-Schmidt
/// pass) above which a second pass is applied.
const REORTH_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmresConfig {
    /// Relative residual `|b - A x| / |b|` at which to stop.
    pub tol: f64,
    pub max_iters: usize,
    /// Restart length; `None` runs a single unrestarted cycle.
    pub restart: Option<usize>,
    pub record_history: bool,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 500, restart: None, record_history: true }
    }
}

impl GmresConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(QttError::Argument(format!("GMRES tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(QttError::Argument("GMRES needs max_iters >= 1".into()));
        }
        if self.restart == Some(0) {
            return Err(QttError::Argument("GMRES restart length must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Relative residual estimates, starting with the initial residual.
    pub residual_history: Vec<f64>,
    pub matvec_count: usize,
    pub converged: bool,
    /// Relative residual recomputed from the returned solution.
    pub residual: f64,
}

pub type LinearMap<'a> = dyn FnMut(&[f64], &mut [f64]) + 'a;

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Solves `A x = b` from a zero initial guess.
///
/// With a preconditioner `M` the iteration runs on `A M y = b` and returns
/// `x = M y`, so every reported residual is a residual of the original
/// system.
pub fn gmres(
    apply_a: &mut LinearMap<'_>,
    b: &[f64],
    cfg: &GmresConfig,
    precond: Option<&mut LinearMap<'_>>,
) -> Result<SolveResult> {
    gmres_from(apply_a, b, None, cfg, precond)
}

/// [`gmres`] starting from `x0`.
pub fn gmres_from(
    apply_a: &mut LinearMap<'_>,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &GmresConfig,
    mut precond: Option<&mut LinearMap<'_>>,
) -> Result<SolveResult> {
    cfg.validate()?;
    let n = b.len();
    if let Some(x0) = x0 {
        if x0.len() != n {
            return Err(QttError::Shape(format!("initial guess has length {}, expected {n}", x0.len())));
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(QttError::Data("right-hand side has non-finite entries".into()));
    }
    let bnorm = norm(b);
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut matvecs = 0;
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveResult {
            solution: x,
            iterations: 0,
            residual_history: vec![0.0],
            matvec_count: 0,
            converged: true,
            residual: 0.0,
        });
    }

    let mut tmp = vec![0.0; n];
    let residual_of = |x: &[f64], r: &mut [f64], apply_a: &mut LinearMap<'_>, count: &mut usize| {
        apply_a(x, r);
        *count += 1;
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
    };

    let mut r = vec![0.0; n];
    if x0.is_some() {
        residual_of(&x, &mut r, apply_a, &mut matvecs);
    } else {
        r.copy_from_slice(b);
    }
    let mut beta = norm(&r);
    let mut history = Vec::new();
    if cfg.record_history {
        history.push(beta / bnorm);
    }
    let cycle_len = cfg.restart.unwrap_or(cfg.max_iters).min(cfg.max_iters);
    let mut iterations = 0;
    let mut converged = beta / bnorm <= cfg.tol;
    let mut z = vec![0.0; n];

    while !converged && iterations < cfg.max_iters && beta > 0.0 {
        let m = cycle_len.min(cfg.max_iters - iterations);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        // Hessenberg columns after Givens rotations, plus the rotated rhs.
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut cs: Vec<(f64, f64)> = Vec::with_capacity(m);
        let mut g = vec![beta];
        let mut steps = 0;

        for j in 0..m {
            let mut w = vec![0.0; n];
            match precond.as_deref_mut() {
                Some(p) => {
                    p(&basis[j], &mut z);
                    apply_a(&z, &mut w);
                }
                None => apply_a(&basis[j], &mut w),
            }
            matvecs += 1;
            if w.iter().any(|v| !v.is_finite()) {
                return Err(QttError::Data("operator produced non-finite values".into()));
            }
            let mut col = vec![0.0; j + 2];
            for (i, v) in basis.iter().enumerate() {
                let c = dot(v, &w);
                col[i] = c;
                w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
            }
            let mut wn = norm(&w);
            if wn > 0.0 {
                let loss = basis.iter().map(|v| dot(v, &w).abs()).fold(0.0, f64::max) / wn;
                if loss > REORTH_THRESHOLD {
                    for (i, v) in basis.iter().enumerate() {
                        let c = dot(v, &w);
                        col[i] += c;
                        w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
                    }
                    wn = norm(&w);
                }
            }
            col[j + 1] = wn;
            for (i, &(c, s)) in cs.iter().enumerate() {
                let (a, b) = (col[i], col[i + 1]);
                col[i] = c * a + s * b;
                col[i + 1] = -s * a + c * b;
            }
            let (a, b) = (col[j], col[j + 1]);
            let rho = a.hypot(b);
            let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (a / rho, b / rho) };
            col[j] = rho;
            col[j + 1] = 0.0;
            cs.push((c, s));
            let gj = g[j];
            g[j] = c * gj;
            g.push(-s * gj);
            h.push(col);
            steps += 1;
            iterations += 1;

            let est = g[j + 1].abs() / bnorm;
            if cfg.record_history {
                history.push(est);
            }
            if est <= cfg.tol || wn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }

        // Back substitution for the cycle coefficients.
        let mut y = vec![0.0; steps];
        for i in (0..steps).rev() {
            let mut acc = g[i];
            for k in i + 1..steps {
                acc -= h[k][i] * y[k];
            }
            y[i] = if h[i][i] != 0.0 { acc / h[i][i] } else { 0.0 };
        }
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for (yi, v) in y.iter().zip(&basis) {
            tmp.iter_mut().zip(v).for_each(|(t, vi)| *t += yi * vi);
        }
        match precond.as_deref_mut() {
            Some(p) => {
                p(&tmp, &mut z);
                x.iter_mut().zip(&z).for_each(|(xi, zi)| *xi += zi);
            }
            None => x.iter_mut().zip(&tmp).for_each(|(xi, ti)| *xi += ti),
        }

        residual_of(&x, &mut r, apply_a, &mut matvecs);
        beta = norm(&r);
        let est = g[steps].abs() / bnorm;
        converged = est <= cfg.tol || beta / bnorm <= cfg.tol;
    }

    let residual = beta / bnorm;
    log::debug!("gmres: {iterations} iterations, residual {residual:.3e}");
    Ok(SolveResult { solution: x, iterations, residual_history: history, matvec_count: matvecs, converged, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dense_solve;
    use faer::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_op(m: &Mat<f64>) -> impl FnMut(&[f64], &mut [f64]) + '_ {
        move |x, y| {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum();
            }
        }
    }

    fn well_conditioned(n: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, n, |i, j| {
            let noise = rng.random_range(-1.0..1.0) / (n as f64).sqrt() * 0.5;
            if i == j { 2.0 + noise } else { noise }
        })
    }

    #[test]
    fn identity_converges_in_one_step() {
        let b = vec![1.0, -2.0, 3.0];
        let mut id = |x: &[f64], y: &mut [f64]| y.copy_from_slice(x);
        let res = gmres(&mut id, &b, &GmresConfig::default(), None).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        for (x, b) in res.solution.iter().zip(&b) {
            assert!((x - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_dense_solve() {
        let n = 50;
        let m = well_conditioned(n, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = GmresConfig { tol: 1e-12, ..Default::default() };
        let res = gmres(&mut dense_op(&m), &b, &cfg, None).unwrap();
        let exact = dense_solve(m.as_ref(), &b).unwrap();
        assert!(res.converged);
        let err = res.solution.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / norm(&exact) < 1e-8, "{err}");
    }

    #[test]
    fn history_is_monotone_and_true_residual_matches() {
        let n = 40;
        let m = well_conditioned(n, 5);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let cfg = GmresConfig { tol: 1e-10, ..Default::default() };
        let res = gmres(&mut dense_op(&m), &b, &cfg, None).unwrap();
        for w in res.residual_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        let last = *res.residual_history.last().unwrap();
        assert!((res.residual - last).abs() <= 1e-8 * res.residual.max(last).max(1e-12) + 1e-14);
        assert_eq!(res.matvec_count, res.iterations + 1);
    }

    #[test]
    fn exact_preconditioner_needs_at_most_two_iterations() {
        let n = 30;
        let m = well_conditioned(n, 6);
        let inv = crate::linalg::LuFactors::new(m.as_ref()).unwrap();
        let minv = inv.solve(Mat::<f64>::identity(n, n).as_ref()).unwrap();
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut p = dense_op(&minv);
        let res = gmres(&mut dense_op(&m), &b, &GmresConfig::default(), Some(&mut p)).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
    }

    #[test]
    fn restarted_still_converges() {
        let n = 60;
        let m = well_conditioned(n, 7);
        let b = vec![1.0; n];
        let cfg = GmresConfig { tol: 1e-9, restart: Some(5), max_iters: 400, ..Default::default() };
        let res = gmres(&mut dense_op(&m), &b, &cfg, None).unwrap();
        assert!(res.converged);
        assert!(res.residual < 1e-8);
    }

    #[test]
    fn iteration_cap_flags_non_convergence() {
        let n = 60;
        let m = well_conditioned(n, 8);
        let b = vec![1.0; n];
        let cfg = GmresConfig { tol: 1e-14, max_iters: 2, ..Default::default() };
        let res = gmres(&mut dense_op(&m), &b, &cfg, None).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 2);
        assert!(res.residual < 1.0);
    }

    #[test]
    fn warm_start_is_used() {
        let n = 20;
        let m = well_conditioned(n, 9);
        let b = vec![1.0; n];
        let exact = dense_solve(m.as_ref(), &b).unwrap();
        let res = gmres_from(&mut dense_op(&m), &b, Some(&exact), &GmresConfig::default(), None).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GmresConfig { tol: 0.0, ..Default::default() };
        let mut id = |x: &[f64], y: &mut [f64]| y.copy_from_slice(x);
        assert!(gmres(&mut id, &[1.0], &cfg, None).is_err());
    }
}
