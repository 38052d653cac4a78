//! TT-SVD compression of dense tensors and rounding of existing trains.

use faer::{Accum, Mat, MatRef, Par};
use serde::{Deserialize, Serialize};

use crate::error::{QttError, Result};
use crate::linalg::{qr_orthonormalize, truncated_svd};
use crate::tensor::{Core, DenseTensor, TTOperator, TTVector, TensorTrain, TensorizationScheme};

/// Accuracy and effort controls shared by TT-SVD, rounding and cross.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionConfig {
    /// Relative Frobenius accuracy.
    pub target_eps: f64,
    pub max_rank: usize,
    /// Random entries used to accept a cross approximation.
    pub cross_validation_samples: usize,
    pub max_sweeps: usize,
    /// Extra rank tried at each bond per cross sweep.
    pub kick_rank: usize,
    pub seed: u64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            target_eps: 1e-6,
            max_rank: 1024,
            cross_validation_samples: 1000,
            max_sweeps: 20,
            kick_rank: 4,
            seed: 0,
        }
    }
}

impl CompressionConfig {
    pub fn with_eps(eps: f64) -> Self {
        Self { target_eps: eps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_eps > 0.0) || !self.target_eps.is_finite() {
            return Err(QttError::Argument(format!("eps must be positive, got {}", self.target_eps)));
        }
        if self.max_rank == 0 || self.kick_rank == 0 {
            return Err(QttError::Argument("max_rank and kick_rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sequential truncated SVDs of the unfoldings, each with absolute tolerance
/// `eps * ||t||_F / sqrt(d - 1)`, so that `||t - TT||_F <= eps ||t||_F`
/// (unless `max_rank` binds).
pub fn tt_svd(t: &DenseTensor, cfg: &CompressionConfig) -> Result<TensorTrain> {
    cfg.validate()?;
    let modes = t.modes();
    let d = modes.len();
    if d == 1 {
        return TensorTrain::new(vec![Core::new(1, modes[0], 1, t.data().to_vec())?]);
    }
    let delta = cfg.target_eps * t.frobenius_norm() / ((d - 1) as f64).sqrt();
    let mut cores = Vec::with_capacity(d);
    // Remainder stored column-major as (r_{k-1} * n_k) x (n_{k+1} ... n_d),
    // with the bond index varying fastest within a row group.
    let mut rest: Vec<f64> = t.data().to_vec();
    let mut left = 1usize;
    for &n in &modes[..d - 1] {
        let rows = left * n;
        let cols = rest.len() / rows;
        let f = truncated_svd(
            MatRef::from_column_major_slice(&rest, rows, cols),
            delta,
            Some(cfg.max_rank),
        )?;
        let r = f.rank;
        let u = &f.left;
        cores.push(Core::from_fn(left, n, r, |a, i, b| u[(a + left * i, b)]));
        let mut next = Vec::with_capacity(r * cols);
        for j in 0..cols {
            next.extend(f.right.col(j).iter().copied());
        }
        rest = next;
        left = r;
    }
    let n = modes[d - 1];
    cores.push(Core::from_fn(left, n, 1, |a, i, _| rest[a + left * i]));
    TensorTrain::new(cores)
}

pub fn compress_vector(
    values: &[f64],
    modes: &[usize],
    cfg: &CompressionConfig,
) -> Result<TTVector> {
    let t = DenseTensor::new(values.to_vec(), modes.to_vec())?;
    Ok(TTVector::new(tt_svd(&t, cfg)?))
}

/// Compresses a matrix whose rows and columns are already in scheme order.
pub fn compress_matrix(
    m: MatRef<'_, f64>,
    scheme: &TensorizationScheme,
    cfg: &CompressionConfig,
) -> Result<TTOperator> {
    let t = DenseTensor::from_matrix(m, &scheme.row_modes(), &scheme.col_modes())?;
    TTOperator::new(tt_svd(&t, cfg)?, scheme.clone())
}

/// Makes cores `k+1..d` right-orthogonal (rows of their right unfoldings
/// orthonormal), pushing the non-orthogonal factors into core `k`.
pub fn orthogonalize_right(train: &mut TensorTrain, k: usize) -> Result<()> {
    let d = train.depth();
    for j in (k + 1..d).rev() {
        let (head, tail) = train.cores_mut().split_at_mut(j);
        let core = &mut tail[0];
        let prev = &mut head[j - 1];
        let (q, r) = qr_orthonormalize(core.as_right_matrix().transpose())?;
        // core = r^T q^T
        let rank = q.ncols();
        *core = Core::from_right_matrix(q.transpose(), core.mode(), core.right_rank())?;
        let mut merged = Mat::<f64>::zeros(prev.left_rank() * prev.mode(), rank);
        faer::linalg::matmul::matmul(
            merged.as_mut(),
            Accum::Replace,
            prev.as_left_matrix(),
            r.transpose(),
            1.0,
            Par::Seq,
        );
        *prev = Core::from_left_matrix(merged.as_ref(), prev.left_rank(), prev.mode())?;
    }
    Ok(())
}

/// Makes cores `0..k` left-orthogonal, pushing the factors into core `k`.
pub fn orthogonalize_left(train: &mut TensorTrain, k: usize) -> Result<()> {
    for j in 0..k {
        let (head, tail) = train.cores_mut().split_at_mut(j + 1);
        let core = &mut head[j];
        let next = &mut tail[0];
        let (q, r) = qr_orthonormalize(core.as_left_matrix())?;
        let rank = q.ncols();
        *core = Core::from_left_matrix(q.as_ref(), core.left_rank(), core.mode())?;
        let mut merged = Mat::<f64>::zeros(rank, next.mode() * next.right_rank());
        faer::linalg::matmul::matmul(
            merged.as_mut(),
            Accum::Replace,
            r.as_ref(),
            next.as_right_matrix(),
            1.0,
            Par::Seq,
        );
        *next = Core::from_right_matrix(merged.as_ref(), next.mode(), next.right_rank())?;
    }
    Ok(())
}

/// Re-truncates a train to relative accuracy `eps`, optionally capping ranks.
///
/// The result is left-orthogonal in all cores but the last, and its ranks
/// never exceed the input ranks.
pub fn tt_round_capped(x: &TensorTrain, eps: f64, max_rank: Option<usize>) -> Result<TensorTrain> {
    if !(eps >= 0.0) {
        return Err(QttError::Argument(format!("eps must be non-negative, got {eps}")));
    }
    let d = x.depth();
    let mut t = x.clone();
    if d == 1 {
        return Ok(t);
    }
    orthogonalize_right(&mut t, 0)?;
    let norm = t.core(0).data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let delta = eps * norm / ((d - 1) as f64).sqrt();
    for k in 0..d - 1 {
        let (head, tail) = t.cores_mut().split_at_mut(k + 1);
        let core = &mut head[k];
        let next = &mut tail[0];
        let f = truncated_svd(core.as_left_matrix(), delta, max_rank)?;
        *core = Core::from_left_matrix(f.left.as_ref(), core.left_rank(), core.mode())?;
        let mut merged = Mat::<f64>::zeros(f.rank, next.mode() * next.right_rank());
        faer::linalg::matmul::matmul(
            merged.as_mut(),
            Accum::Replace,
            f.right.as_ref(),
            next.as_right_matrix(),
            1.0,
            Par::Seq,
        );
        *next = Core::from_right_matrix(merged.as_ref(), next.mode(), next.right_rank())?;
    }
    Ok(t)
}

pub fn tt_round(x: &TensorTrain, eps: f64) -> Result<TensorTrain> {
    tt_round_capped(x, eps, None)
}

pub fn round_vector(x: &TTVector, eps: f64) -> Result<TTVector> {
    Ok(TTVector::new(tt_round(x.train(), eps)?))
}

pub fn round_operator(a: &TTOperator, eps: f64) -> Result<TTOperator> {
    TTOperator::new(tt_round(a.train(), eps)?, a.scheme().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dense(modes: &[usize], rng: &mut impl Rng) -> DenseTensor {
        DenseTensor::from_fn(modes.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn dist(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn separable_tensor_has_unit_ranks() {
        let t = DenseTensor::from_fn(vec![3, 2, 4], |m| {
            (1.0 + m[0] as f64) * (2.0 - m[1] as f64) * (0.5 + m[2] as f64)
        })
        .unwrap();
        let tt = tt_svd(&t, &CompressionConfig::with_eps(1e-12)).unwrap();
        assert_eq!(tt.ranks(), vec![1, 1, 1, 1]);
        assert!(dist(&tt.to_dense().unwrap(), &t) < 1e-12 * t.frobenius_norm());
    }

    #[test]
    fn identity_operator_has_unit_ranks() {
        let scheme = TensorizationScheme::morton(1, 3).unwrap();
        let a = compress_matrix(
            Mat::<f64>::identity(8, 8).as_ref(),
            &scheme,
            &CompressionConfig::with_eps(1e-12),
        )
        .unwrap();
        assert_eq!(a.ranks(), vec![1, 1, 1, 1]);
        let diff = &a.to_matrix().unwrap() - Mat::<f64>::identity(8, 8);
        assert!(diff.norm_l2() < 1e-14);
    }

    #[test]
    fn random_tensor_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_dense(&[2, 2, 2, 2], &mut rng);
        let tt = tt_svd(&t, &CompressionConfig::with_eps(1e-8)).unwrap();
        assert!(dist(&tt.to_dense().unwrap(), &t) <= 1e-8 * t.frobenius_norm());
    }

    #[test]
    fn entries_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_dense(&[3, 2, 4, 2], &mut rng);
        let tt = tt_svd(&t, &CompressionConfig::with_eps(1e-12)).unwrap();
        for lin in 0..t.len() {
            let m = crate::tensor::scheme::split_digits(lin, t.modes());
            let want = t.data()[lin];
            assert!((tt.entry(&m).unwrap() - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_eps() {
        let t = DenseTensor::zeros(vec![2, 2]).unwrap();
        assert!(tt_svd(&t, &CompressionConfig::with_eps(0.0)).is_err());
    }

    #[test]
    fn rounding_rank_one_is_stable() {
        let x = TensorTrain::ones(&[2, 3, 2]).unwrap();
        let y = tt_round(&x, 1e-12).unwrap();
        assert_eq!(y.ranks(), x.ranks());
        assert!((y.frobenius_norm() - 12f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rounding_doubled_train_restores_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = TensorTrain::random(&[2, 2, 2, 2, 2], &[1, 2, 3, 3, 2, 1], &mut rng).unwrap();
        let doubled = crate::arith::tt_add(&x, &x).unwrap();
        assert_eq!(doubled.ranks(), vec![1, 4, 6, 6, 4, 1]);
        let y = tt_round(&doubled, 1e-12).unwrap();
        assert_eq!(y.ranks(), x.ranks());
        let want = x.to_dense().unwrap();
        let got = y.to_dense().unwrap();
        let err: f64 = want.data().iter().zip(got.data()).map(|(a, b)| (2.0 * a - b).powi(2)).sum();
        assert!(err.sqrt() < 1e-12 * 2.0 * want.frobenius_norm());
    }

    #[test]
    fn orthogonality_after_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = TensorTrain::random(&[3, 2, 4], &[1, 3, 2, 1], &mut rng).unwrap();
        let y = tt_round(&x, 0.0).unwrap();
        for core in &y.cores()[..2] {
            let l = core.as_left_matrix();
            let g = l.transpose() * l;
            let eye = Mat::<f64>::identity(g.nrows(), g.ncols());
            assert!((&g - &eye).norm_l2() < 1e-12);
        }
    }
}
