//! Dense low-rank and direct linear-algebra primitives.

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef};

use crate::error::{QttError, Result};

/// `left * right` approximates a matrix to within `achieved_error` in the
/// Frobenius norm.
#[derive(Clone, Debug)]
pub struct LowRankFactors {
    /// `p x r`, orthonormal columns when produced by [`truncated_svd`].
    pub left: Mat<f64>,
    /// `r x q`.
    pub right: Mat<f64>,
    pub rank: usize,
    pub achieved_error: f64,
    /// Singular values that were kept.
    pub singular_values: Vec<f64>,
}

fn check_finite(m: MatRef<'_, f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(QttError::Data(format!("non-finite entry at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Smallest rank whose discarded tail `sqrt(sum_{j >= r} s_j^2)` is at most
/// `tol`, never below 1, together with that tail.
pub fn truncation_rank(singular_values: &[f64], tol: f64, max_rank: Option<usize>) -> (usize, f64) {
    let n = singular_values.len();
    // tails[r] = energy discarded when keeping r values.
    let mut tails = vec![0.0; n + 1];
    for r in (0..n).rev() {
        tails[r] = tails[r + 1] + singular_values[r] * singular_values[r];
    }
    let tol2 = tol * tol;
    let mut r = (0..=n).find(|&r| tails[r] <= tol2).unwrap_or(n).max(1);
    if let Some(cap) = max_rank {
        r = r.min(cap.max(1));
    }
    let r = r.min(n);
    (r, tails[r].sqrt())
}

/// Truncated SVD with a Frobenius tail criterion.
///
/// The returned rank is the smallest `r >= 1` with discarded energy at most
/// `tol` (absolute), capped by `max_rank`. Each kept left singular vector is
/// signed so that its largest-magnitude entry is positive.
pub fn truncated_svd(m: MatRef<'_, f64>, tol: f64, max_rank: Option<usize>) -> Result<LowRankFactors> {
    if !(tol >= 0.0) {
        return Err(QttError::Argument(format!("tolerance must be non-negative, got {tol}")));
    }
    check_finite(m)?;
    let (p, q) = (m.nrows(), m.ncols());
    if p == 0 || q == 0 {
        return Err(QttError::Shape(format!("cannot factor an empty {p}x{q} matrix")));
    }
    let svd = m
        .thin_svd()
        .map_err(|e| QttError::Data(format!("SVD did not converge: {e:?}")))?;
    let s: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let (r, achieved_error) = truncation_rank(&s, tol, max_rank);
    let u = svd.U();
    let v = svd.V();
    let mut left = Mat::<f64>::zeros(p, r);
    let mut right = Mat::<f64>::zeros(r, q);
    for c in 0..r {
        let col = u.col(c);
        let mut best = 0;
        for i in 1..p {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..p {
            left[(i, c)] = sign * col[i];
        }
        let sc = sign * s[c];
        for j in 0..q {
            right[(c, j)] = sc * v[(j, c)];
        }
    }
    Ok(LowRankFactors {
        left,
        right,
        rank: r,
        achieved_error,
        singular_values: s[..r].to_vec(),
    })
}

/// Solves `m x = b` by LU with partial pivoting.
pub fn dense_solve(m: MatRef<'_, f64>, b: &[f64]) -> Result<Vec<f64>> {
    let rhs = MatRef::from_column_major_slice(b, b.len(), 1);
    let x = dense_solve_many(m, rhs)?;
    Ok(x.col(0).iter().copied().collect())
}

/// Multi right-hand-side variant of [`dense_solve`].
pub fn dense_solve_many(m: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let lu = LuFactors::new(m)?;
    lu.solve(b)
}

/// A pivoted LU factorization that has passed the singularity check.
pub struct LuFactors {
    lu: faer::linalg::solvers::PartialPivLu<f64>,
    n: usize,
}

impl LuFactors {
    pub fn new(m: MatRef<'_, f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n || n == 0 {
            return Err(QttError::Shape(format!(
                "dense solve needs a non-empty square matrix, got {}x{}",
                n,
                m.ncols()
            )));
        }
        check_finite(m)?;
        let lu = m.partial_piv_lu();
        let u = lu.U();
        let mut max_pivot = 0.0f64;
        for i in 0..n {
            max_pivot = max_pivot.max(u[(i, i)].abs());
        }
        let floor = n as f64 * f64::EPSILON * max_pivot;
        for i in 0..n {
            let pivot = u[(i, i)];
            if pivot.abs() <= floor || max_pivot == 0.0 {
                return Err(QttError::Singular {
                    pivot_index: i,
                    pivot,
                    max_pivot,
                });
            }
        }
        Ok(Self { lu, n })
    }

    pub fn solve(&self, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
        if b.nrows() != self.n {
            return Err(QttError::Shape(format!(
                "right-hand side has {} rows, matrix has {}",
                b.nrows(),
                self.n
            )));
        }
        let mut x = b.to_owned();
        self.lu.solve_in_place(x.as_mut());
        Ok(x)
    }
}

/// Thin QR factorization with a non-negative diagonal in `R`.
///
/// For a `p x q` input, `Q` is `p x min(p, q)` and `R` is `min(p, q) x q`.
pub fn qr_orthonormalize(m: MatRef<'_, f64>) -> Result<(Mat<f64>, Mat<f64>)> {
    check_finite(m)?;
    let qr = m.qr();
    let mut q = qr.compute_thin_Q();
    let mut r = qr.thin_R().to_owned();
    for k in 0..r.nrows().min(r.ncols()) {
        if r[(k, k)] < 0.0 {
            for j in 0..r.ncols() {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..q.nrows() {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    Ok((q, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<f64> {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn max_abs(m: MatRef<'_, f64>) -> f64 {
        let mut out = 0.0f64;
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                out = out.max(m[(i, j)].abs());
            }
        }
        out
    }

    #[test]
    fn identity_keeps_full_rank() {
        let f = truncated_svd(Mat::<f64>::identity(4, 4).as_ref(), 0.0, None).unwrap();
        assert_eq!(f.rank, 4);
        let prod = &f.left * &f.right;
        assert!(max_abs((&prod - Mat::<f64>::identity(4, 4)).as_ref()) < 1e-14);
    }

    #[test]
    fn outer_product_is_rank_one() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, -1.0, 2.0];
        let m = Mat::from_fn(3, 4, |i, j| u[i] * v[j]);
        let f = truncated_svd(m.as_ref(), 1e-12, None).unwrap();
        assert_eq!(f.rank, 1);
        // Sign convention: the largest entry of the left vector is positive.
        assert!(f.left[(1, 0)] > 0.0);
    }

    #[test]
    fn tail_matches_full_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random(8, 8, &mut rng);
        let s = m.singular_values().unwrap();
        let tol = (s[4..].iter().map(|x| x * x).sum::<f64>()).sqrt();
        let f = truncated_svd(m.as_ref(), tol * (1.0 + 1e-12), None).unwrap();
        assert_eq!(f.rank, 4);
        assert!((f.achieved_error - tol).abs() <= 1e-12 * tol.max(1.0));
        let err = (&m - &f.left * &f.right).norm_l2();
        assert!((err - f.achieved_error).abs() < 1e-12);
    }

    #[test]
    fn rank_cap_and_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(6, 5, &mut rng);
        assert_eq!(truncated_svd(m.as_ref(), 0.0, Some(2)).unwrap().rank, 2);
        let z = Mat::<f64>::zeros(3, 3);
        let f = truncated_svd(z.as_ref(), 0.0, None).unwrap();
        assert_eq!(f.rank, 1);
        assert_eq!(f.achieved_error, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Mat::<f64>::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(truncated_svd(m.as_ref(), 0.0, None), Err(QttError::Data(_))));
    }

    #[test]
    fn trivial_solves() {
        let b = [3.0, -1.0, 2.0];
        assert_eq!(dense_solve(Mat::<f64>::identity(3, 3).as_ref(), &b).unwrap(), b.to_vec());
        let d = Mat::from_fn(3, 3, |i, j| if i == j { [1.0, 2.0, 4.0][i] } else { 0.0 });
        let x = dense_solve(d.as_ref(), &[1.0, 2.0, 4.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn random_solve_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = random(20, 20, &mut rng);
        for i in 0..20 {
            m[(i, i)] += 10.0;
        }
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = dense_solve(m.as_ref(), &b).unwrap();
        let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let res: f64 = (0..20)
            .map(|i| {
                let mx: f64 = (0..20).map(|j| m[(i, j)] * x[j]).sum();
                (mx - b[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        assert!(res <= 1e-10 * bn);
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let m = Mat::from_fn(3, 3, |i, j| (i + j) as f64);
        match dense_solve(m.as_ref(), &[1.0, 1.0, 1.0]) {
            Err(QttError::Singular { pivot_index, max_pivot, .. }) => {
                assert_eq!(pivot_index, 2);
                assert!(max_pivot > 0.0);
            }
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn qr_of_orthonormal_input() {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let m = Mat::from_fn(3, 2, |i, j| [[c, c], [c, -c], [0.0, 0.0]][i][j]);
        let (q, r) = qr_orthonormalize(m.as_ref()).unwrap();
        for k in 0..2 {
            assert!((r[(k, k)] - 1.0).abs() < 1e-14);
        }
        assert!(r[(0, 1)].abs() < 1e-14);
        assert!(max_abs((&q - &m).as_ref()) < 1e-14);
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random(6, 3, &mut rng);
        let (q, r) = qr_orthonormalize(m.as_ref()).unwrap();
        assert!(max_abs((&q * &r - &m).as_ref()) < 1e-12);
        let gram = q.transpose() * &q;
        assert!((&gram - Mat::<f64>::identity(3, 3)).norm_l2() <= 1e-12 * 3f64.sqrt());
        for k in 0..3 {
            assert!(r[(k, k)] >= 0.0);
        }
    }

    #[test]
    fn qr_of_rank_deficient_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(6, 2, &mut rng);
        let b = random(2, 4, &mut rng);
        let m = &a * &b;
        let (q, r) = qr_orthonormalize(m.as_ref()).unwrap();
        let rank = m.singular_values().unwrap().iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(rank, 2);
        for i in rank..r.nrows() {
            for j in 0..r.ncols() {
                assert!(r[(i, j)].abs() < 1e-12);
            }
        }
        // The leading columns of Q span the column space of m.
        let qk = q.subcols(0, rank);
        let proj = qk * (qk.transpose() * &m);
        assert!(max_abs((&proj - &m).as_ref()) < 1e-12);
    }
}
