//! Two-site (DMRG-style) cross approximation from an entry oracle.
//!
//! Each bond keeps a set of left multi-indices (prefixes) and right
//! multi-indices (suffixes). A sweep evaluates the two-core "supercore" on
//! those index sets, truncates it by SVD, pads the kept basis with
//! `kick_rank` random directions, and picks new index sets with maxvol.
//! Ranks therefore adapt to the data: a bond can grow by up to the mode size
//! in one step and shrinks back when the supercore is numerically low-rank.

use faer::{Mat, MatRef};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compress::{tt_round, CompressionConfig};
use crate::error::{QttError, Result};
use crate::linalg::{qr_orthonormalize, truncated_svd, LuFactors};
use crate::tensor::{Core, TensorTrain};

/// A deterministic entry function over multi-indices.
pub trait EntryOracle: Sync {
    fn modes(&self) -> &[usize];
    fn entry(&self, idx: &[usize]) -> f64;
}

/// Adapts a closure to [`EntryOracle`].
pub struct FnOracle<F> {
    modes: Vec<usize>,
    f: F,
}

impl<F: Fn(&[usize]) -> f64 + Sync> FnOracle<F> {
    pub fn new(modes: Vec<usize>, f: F) -> Self {
        Self { modes, f }
    }
}

impl<F: Fn(&[usize]) -> f64 + Sync> EntryOracle for FnOracle<F> {
    fn modes(&self) -> &[usize] {
        &self.modes
    }

    fn entry(&self, idx: &[usize]) -> f64 {
        (self.f)(idx)
    }
}

#[derive(Clone, Debug)]
pub struct CrossResult {
    pub train: TensorTrain,
    /// Whether the sampled error met the acceptance threshold.
    pub converged: bool,
    /// Full (forward and backward) sweeps performed.
    pub sweeps: usize,
    /// Relative RMS error on the last validation sample.
    pub validation_error: f64,
    pub evaluations: u64,
}

/// Picks `r` rows of a tall `m x r` matrix whose square submatrix has
/// (locally) maximal volume: no row of `a * a[rows]^{-1}` has an entry larger
/// than `tol` in magnitude.
pub fn maxvol(a: MatRef<'_, f64>, tol: f64, max_iters: usize) -> Result<Vec<usize>> {
    let (m, r) = (a.nrows(), a.ncols());
    if r > m || r == 0 {
        return Err(QttError::Shape(format!("maxvol needs a tall matrix, got {m}x{r}")));
    }
    // Initial rows from Gaussian elimination with partial pivoting.
    let mut work = a.to_owned();
    let mut rows: Vec<usize> = (0..m).collect();
    for j in 0..r {
        let mut p = j;
        for i in j + 1..m {
            if work[(i, j)].abs() > work[(p, j)].abs() {
                p = i;
            }
        }
        if p != j {
            rows.swap(p, j);
            for c in 0..r {
                let t = work[(p, c)];
                work[(p, c)] = work[(j, c)];
                work[(j, c)] = t;
            }
        }
        let piv = work[(j, j)];
        if piv == 0.0 {
            continue;
        }
        for i in j + 1..m {
            let l = work[(i, j)] / piv;
            if l != 0.0 {
                for c in j..r {
                    work[(i, c)] -= l * work[(j, c)];
                }
            }
        }
    }
    let mut sel: Vec<usize> = rows[..r].to_vec();
    let mut b = interpolating_basis(a, &sel)?;
    for _ in 0..max_iters {
        let (mut bi, mut bj, mut big) = (0, 0, 0.0f64);
        for j in 0..r {
            for i in 0..m {
                if b[(i, j)].abs() > big {
                    big = b[(i, j)].abs();
                    bi = i;
                    bj = j;
                }
            }
        }
        if big <= tol {
            break;
        }
        // Row bi replaces sel[bj]: b -= b[:, bj] (b[bi, :] - e_bj) / b[bi, bj].
        let pivot = b[(bi, bj)];
        let col: Vec<f64> = (0..m).map(|i| b[(i, bj)]).collect();
        let mut row: Vec<f64> = (0..r).map(|j| b[(bi, j)]).collect();
        row[bj] -= 1.0;
        for j in 0..r {
            let f = row[j] / pivot;
            if f != 0.0 {
                for i in 0..m {
                    b[(i, j)] -= col[i] * f;
                }
            }
        }
        sel[bj] = bi;
    }
    Ok(sel)
}

/// `q * q[sel]^{-1}`: the interpolating basis that reproduces the selected
/// rows exactly.
fn interpolating_basis(q: MatRef<'_, f64>, sel: &[usize]) -> Result<Mat<f64>> {
    let r = q.ncols();
    let sub_t = Mat::from_fn(r, r, |i, j| q[(sel[j], i)]);
    // (q sub^{-1})^T = sub^{-T} q^T
    let x = LuFactors::new(sub_t.as_ref())?.solve(q.transpose())?;
    Ok(x.transpose().to_owned())
}

struct Sweeper<'a, O: EntryOracle + ?Sized> {
    oracle: &'a O,
    modes: Vec<usize>,
    /// left[c]: prefixes of length c, row-major, one per bond index.
    left: Vec<Vec<Vec<usize>>>,
    /// right[c]: suffixes for positions c+1..d.
    right: Vec<Vec<Vec<usize>>>,
    cores: Vec<Core>,
    cfg: CompressionConfig,
    rng: ChaCha8Rng,
    evaluations: u64,
    idx: Vec<usize>,
}

impl<O: EntryOracle + ?Sized> Sweeper<'_, O> {
    fn d(&self) -> usize {
        self.modes.len()
    }

    /// Supercore of cores `c, c+1` as a `(|L| n_c) x (n_{c+1} |R|)` matrix.
    fn supercore(&mut self, c: usize) -> Mat<f64> {
        let (nl, nr) = (self.modes[c], self.modes[c + 1]);
        let (ls, rs) = (&self.left[c], &self.right[c + 1]);
        let (rows, cols) = (ls.len() * nl, nr * rs.len());
        let mut out = Mat::<f64>::zeros(rows, cols);
        let idx = &mut self.idx;
        for (a, pre) in ls.iter().enumerate() {
            idx[..c].copy_from_slice(pre);
            for (b, suf) in rs.iter().enumerate() {
                idx[c + 2..].copy_from_slice(suf);
                for i in 0..nl {
                    idx[c] = i;
                    for j in 0..nr {
                        idx[c + 1] = j;
                        out[(a * nl + i, j * rs.len() + b)] = self.oracle.entry(idx);
                    }
                }
            }
        }
        self.evaluations += (rows * cols) as u64;
        out
    }

    /// Orthonormal basis of the truncated dominant subspace, padded with
    /// `kick_rank` random directions.
    fn basis(&mut self, m: MatRef<'_, f64>, tol: f64) -> Result<Mat<f64>> {
        let f = truncated_svd(m, tol, Some(self.cfg.max_rank))?;
        let rows = m.nrows();
        let target = (f.rank + self.cfg.kick_rank).min(rows).min(self.cfg.max_rank.max(f.rank));
        if target == f.rank {
            return Ok(f.left);
        }
        let extra = target - f.rank;
        let mut padded = Mat::<f64>::zeros(rows, target);
        padded.as_mut().subcols_mut(0, f.rank).copy_from(&f.left);
        for j in 0..extra {
            for i in 0..rows {
                padded[(i, f.rank + j)] = self.rng.random_range(-1.0..1.0);
            }
        }
        let (q, _) = qr_orthonormalize(padded.as_ref())?;
        Ok(q)
    }

    fn tolerance(&self, s: &Mat<f64>) -> f64 {
        let d = self.d();
        self.cfg.target_eps * s.norm_l2() / ((d - 1) as f64).sqrt()
    }

    fn forward(&mut self) -> Result<()> {
        let d = self.d();
        for c in 0..d - 1 {
            let s = self.supercore(c);
            let tol = self.tolerance(&s);
            let q = self.basis(s.as_ref(), tol)?;
            let sel = maxvol(q.as_ref(), 1.05, 100)?;
            let g = interpolating_basis(q.as_ref(), &sel)?;
            let (nl, width) = (self.modes[c], self.left[c].len());
            self.cores[c] = Core::from_left_matrix(g.as_ref(), width, nl)?;
            self.left[c + 1] = sel
                .iter()
                .map(|&s| {
                    let mut p = self.left[c][s / nl].clone();
                    p.push(s % nl);
                    p
                })
                .collect();
            if c == d - 2 {
                let last = Mat::from_fn(sel.len(), s.ncols(), |i, j| s[(sel[i], j)]);
                self.cores[c + 1] = Core::from_right_matrix(last.as_ref(), self.modes[c + 1], 1)?;
            }
        }
        Ok(())
    }

    fn backward(&mut self) -> Result<()> {
        let d = self.d();
        for c in (0..d - 1).rev() {
            let s = self.supercore(c);
            let tol = self.tolerance(&s);
            let st = s.transpose().to_owned();
            let q = self.basis(st.as_ref(), tol)?;
            let sel = maxvol(q.as_ref(), 1.05, 100)?;
            let g = interpolating_basis(q.as_ref(), &sel)?;
            let (nr, width) = (self.modes[c + 1], self.right[c + 1].len());
            self.cores[c + 1] = Core::from_right_matrix(g.transpose(), nr, width)?;
            self.right[c] = sel
                .iter()
                .map(|&s| {
                    let mut p = vec![s / width];
                    p.extend_from_slice(&self.right[c + 1][s % width]);
                    p
                })
                .collect();
            if c == 0 {
                let first = Mat::from_fn(s.nrows(), sel.len(), |i, j| s[(i, sel[j])]);
                self.cores[0] = Core::from_left_matrix(first.as_ref(), 1, self.modes[0])?;
            }
        }
        Ok(())
    }

    /// Sampled estimate of `||f - train||_F / ||train||_F`: the RMS error over
    /// fresh uniform entries, relative to the exact RMS value of `train`.
    ///
    /// Normalizing by the sampled values instead would be dominated by rare
    /// large entries (such as an operator diagonal) and fluctuate wildly.
    fn validate(&mut self, train: &TensorTrain) -> Result<f64> {
        let samples = self.cfg.cross_validation_samples.max(1);
        let mut num = 0.0;
        let mut idx = vec![0usize; self.d()];
        for _ in 0..samples {
            for (v, &n) in idx.iter_mut().zip(&self.modes) {
                *v = self.rng.random_range(0..n);
            }
            let f = self.oracle.entry(&idx);
            let t = train.entry(&idx)?;
            num += (f - t) * (f - t);
        }
        self.evaluations += samples as u64;
        let total: f64 = self.modes.iter().map(|&n| n as f64).product();
        let rms_err = (num / samples as f64).sqrt();
        let rms_val = train.frobenius_norm() / total.sqrt();
        Ok(if rms_val > 0.0 { rms_err / rms_val } else { rms_err })
    }
}

/// Cross approximation of the tensor defined by `oracle`.
///
/// Sweeps until the result, rounded at `target_eps`, shows an RMS error of at
/// most `3 * target_eps` times its own RMS value on `cross_validation_samples`
/// fresh random entries, or until `max_sweeps` full sweeps have run, in which case
/// the best approximation found is returned with `converged = false`.
pub fn tt_cross<O: EntryOracle + ?Sized>(oracle: &O, cfg: &CompressionConfig) -> Result<CrossResult> {
    cfg.validate()?;
    let modes = oracle.modes().to_vec();
    let d = modes.len();
    if d == 0 || modes.contains(&0) {
        return Err(QttError::Argument(format!("invalid modes {modes:?}")));
    }
    if d == 1 {
        let data = (0..modes[0]).map(|i| oracle.entry(&[i])).collect();
        return Ok(CrossResult {
            train: TensorTrain::new(vec![Core::new(1, modes[0], 1, data)?])?,
            converged: true,
            sweeps: 0,
            validation_error: 0.0,
            evaluations: modes[0] as u64,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Random initial suffix sets, built from the right.
    let r0 = cfg.kick_rank.max(1);
    let mut right = vec![Vec::new(); d];
    right[d - 1] = vec![Vec::new()];
    for c in (0..d - 1).rev() {
        let (n, inner) = (modes[c + 1], right[c + 1].len());
        let pool = n * inner;
        let picks = sample(&mut rng, pool, r0.min(pool));
        let mut sets: Vec<Vec<usize>> = picks
            .iter()
            .map(|s| {
                let mut p = vec![s / inner];
                p.extend_from_slice(&right[c + 1][s % inner]);
                p
            })
            .collect();
        sets.sort();
        right[c] = sets;
    }
    let mut left = vec![Vec::new(); d];
    left[0] = vec![Vec::new()];
    let cores = modes.iter().map(|&n| Core::zeros(1, n, 1)).collect();
    let mut sw = Sweeper {
        oracle,
        modes: modes.clone(),
        left,
        right,
        cores,
        cfg: cfg.clone(),
        rng,
        evaluations: 0,
        idx: vec![0; d],
    };
    let mut best: Option<(f64, TensorTrain)> = None;
    let threshold = 3.0 * cfg.target_eps;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        sw.forward()?;
        sw.backward()?;
        let raw = TensorTrain::new(sw.cores.clone())?;
        let rounded = tt_round(&raw, cfg.target_eps)?;
        let err = sw.validate(&rounded)?;
        log::debug!(
            "cross sweep {sweeps}: max rank {} (before rounding {}), sampled error {err:.3e}",
            rounded.max_rank(),
            raw.max_rank()
        );
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, rounded));
        }
        if err <= threshold {
            break;
        }
    }
    let converged = best.as_ref().is_some_and(|(e, _)| *e <= threshold);
    let (validation_error, train) = best.expect("at least one sweep");
    Ok(CrossResult { train, converged, sweeps, validation_error, evaluations: sw.evaluations })
}
