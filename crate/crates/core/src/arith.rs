//! Tensor-train arithmetic: sums, inner products, diagonal and identity
//! operators, and the compressed and dense matrix-vector products.

use faer::{Accum, Mat, MatMut, MatRef};

use crate::compress::tt_round;
use crate::error::{QttError, Result};
use crate::tensor::{Core, TTOperator, TTVector, TensorTrain, TensorizationScheme};

fn ensure_same_modes(x: &TensorTrain, y: &TensorTrain) -> Result<()> {
    if x.modes() != y.modes() {
        return Err(QttError::Shape(format!(
            "mode structures {:?} and {:?} differ",
            x.modes(),
            y.modes()
        )));
    }
    Ok(())
}

/// The identity operator of a square scheme; every rank is 1.
pub fn tt_identity(scheme: &TensorizationScheme) -> Result<TTOperator> {
    if !scheme.is_square() {
        return Err(QttError::Shape("identity needs equal row and column modes".into()));
    }
    let cores = scheme
        .row_modes()
        .into_iter()
        .map(|m| Core::from_fn(1, m * m, 1, |_, p, _| if p % m == p / m { 1.0 } else { 0.0 }))
        .collect();
    TTOperator::new(TensorTrain::new(cores)?, scheme.clone())
}

/// Entrywise sum. Interior ranks add; the caller usually rounds afterwards.
pub fn tt_add(x: &TensorTrain, y: &TensorTrain) -> Result<TensorTrain> {
    ensure_same_modes(x, y)?;
    let d = x.depth();
    if d == 1 {
        let (a, b) = (x.core(0), y.core(0));
        let data = a.data().iter().zip(b.data()).map(|(u, v)| u + v).collect();
        return TensorTrain::new(vec![Core::new(1, a.mode(), 1, data)?]);
    }
    let mut cores = Vec::with_capacity(d);
    for k in 0..d {
        let (a, b) = (x.core(k), y.core(k));
        let (la, ra, lb, rb) = (a.left_rank(), a.right_rank(), b.left_rank(), b.right_rank());
        let left = if k == 0 { 1 } else { la + lb };
        let right = if k == d - 1 { 1 } else { ra + rb };
        // Offsets of the y-block inside the combined bonds.
        let lo = if k == 0 { 0 } else { la };
        let ro = if k == d - 1 { 0 } else { ra };
        let mut c = Core::zeros(left, a.mode(), right);
        for i in 0..a.mode() {
            for p in 0..la {
                for q in 0..ra {
                    c.set(p, i, q, a.get(p, i, q));
                }
            }
            for p in 0..lb {
                for q in 0..rb {
                    c.set(lo + p, i, ro + q, b.get(p, i, q));
                }
            }
        }
        cores.push(c);
    }
    TensorTrain::new(cores)
}

/// `alpha x + beta y`, unrounded.
pub fn tt_axpby(alpha: f64, x: &TensorTrain, beta: f64, y: &TensorTrain) -> Result<TensorTrain> {
    let mut xs = x.clone();
    xs.scale(alpha);
    let mut ys = y.clone();
    ys.scale(beta);
    tt_add(&xs, &ys)
}

pub fn tt_dot(x: &TTVector, y: &TTVector) -> Result<f64> {
    x.train().dot(y.train())
}

/// The diagonal operator `diag(vec(v))`, with the ranks of `v`.
pub fn tt_diag(v: &TTVector) -> Result<TTOperator> {
    let modes = v.modes();
    let cores = v
        .train()
        .cores()
        .iter()
        .map(|c| {
            let n = c.mode();
            Core::from_fn(c.left_rank(), n * n, c.right_rank(), |a, p, b| {
                if p % n == p / n {
                    c.get(a, p % n, b)
                } else {
                    0.0
                }
            })
        })
        .collect();
    TTOperator::new(TensorTrain::new(cores)?, TensorizationScheme::rectangular(modes.clone(), modes)?)
}

/// Core of the product of an `m x n` operator core with an `n x p` core:
/// `C((a, b), i + m l, (a', b')) = sum_j A(a, i + m j, a') B(b, j + n l, b')`,
/// with the `A` bond index varying slowest in each combined bond.
fn product_core(a: &Core, m: usize, n: usize, b: &Core, p: usize) -> Core {
    let (la, ra, lb, rb) = (a.left_rank(), a.right_rank(), b.left_rank(), b.right_rank());
    let mut c = Core::zeros(la * lb, m * p, ra * rb);
    for al in 0..la {
        for ar in 0..ra {
            for i in 0..m {
                for j in 0..n {
                    let w = a.get(al, i + m * j, ar);
                    if w == 0.0 {
                        continue;
                    }
                    for l in 0..p {
                        for bl in 0..lb {
                            for br in 0..rb {
                                let v = b.get(bl, j + n * l, br);
                                let (row, col) = (al * lb + bl, ar * rb + br);
                                let idx = (row * (m * p) + i + m * l) * (ra * rb) + col;
                                c.data_mut()[idx] += w * v;
                            }
                        }
                    }
                }
            }
        }
    }
    c
}

/// `A b` with ranks `r_A r_b` at every bond, before any rounding.
pub fn tt_matvec_unrounded(a: &TTOperator, b: &TTVector) -> Result<TTVector> {
    if a.col_modes() != b.modes() {
        return Err(QttError::Shape(format!(
            "operator columns {:?} do not match vector modes {:?}",
            a.col_modes(),
            b.modes()
        )));
    }
    let (rows, cols) = (a.row_modes(), a.col_modes());
    let cores = (0..a.depth())
        .map(|k| product_core(a.train().core(k), rows[k], cols[k], b.train().core(k), 1))
        .collect();
    Ok(TTVector::new(TensorTrain::new(cores)?))
}

/// Compressed matrix-vector product rounded at relative accuracy `round_eps`.
pub fn tt_matvec_compressed(a: &TTOperator, b: &TTVector, round_eps: f64) -> Result<TTVector> {
    let y = tt_matvec_unrounded(a, b)?;
    Ok(TTVector::new(tt_round(y.train(), round_eps)?))
}

/// `A B` with ranks `r_A r_B` at every bond, before any rounding.
pub fn tt_matmat_unrounded(a: &TTOperator, b: &TTOperator) -> Result<TTOperator> {
    if a.col_modes() != b.row_modes() {
        return Err(QttError::Shape(format!(
            "inner modes {:?} and {:?} differ",
            a.col_modes(),
            b.row_modes()
        )));
    }
    let (m, n, p) = (a.row_modes(), a.col_modes(), b.col_modes());
    let cores = (0..a.depth())
        .map(|k| product_core(a.train().core(k), m[k], n[k], b.train().core(k), p[k]))
        .collect();
    let scheme = if a.scheme() == b.scheme() {
        a.scheme().clone()
    } else {
        TensorizationScheme::rectangular(m, p)?
    };
    TTOperator::new(TensorTrain::new(cores)?, scheme)
}

pub fn tt_matmat(a: &TTOperator, b: &TTOperator, round_eps: f64) -> Result<TTOperator> {
    let c = tt_matmat_unrounded(a, b)?;
    TTOperator::new(tt_round(c.train(), round_eps)?, c.scheme().clone())
}

/// The transpose operator, with the same ranks.
pub fn tt_transpose(a: &TTOperator) -> Result<TTOperator> {
    let (rows, cols) = (a.row_modes(), a.col_modes());
    let cores = a
        .train()
        .cores()
        .iter()
        .zip(rows.iter().zip(&cols))
        .map(|(c, (&m, &n))| {
            Core::from_fn(c.left_rank(), m * n, c.right_rank(), |al, q, ar| {
                let (j, i) = (q % n, q / n);
                c.get(al, i + m * j, ar)
            })
        })
        .collect();
    TTOperator::new(TensorTrain::new(cores)?, TensorizationScheme::rectangular(cols, rows)?)
}

/// Reusable workspace for [`tt_matvec_dense`]; holding one across calls
/// avoids reallocating the two level buffers.
#[derive(Default)]
pub struct MatvecWorkspace {
    front: Vec<f64>,
    back: Vec<f64>,
    cores: Vec<Mat<f64>>,
    key: Vec<(usize, usize, usize, usize)>,
}

/// Applies a TT operator to a dense vector given in scheme order, one level at
/// a time, finest level first.
///
/// The state after level `k` is a column-major array
/// `[i_1..i_k, a_k, j_{k+1}..j_d]`. Each level moves the current column digit
/// and bond to the front (a blockwise transpose), multiplies by the core
/// reshaped to `(i_k a_k) x (a_{k-1} j_k)`, and moves the new row digit back
/// behind the finished ones. Cost is `O(r^2 N)` per level.
pub fn tt_matvec_dense(a: &TTOperator, x: &[f64]) -> Result<Vec<f64>> {
    let mut ws = MatvecWorkspace::default();
    let mut y = Vec::new();
    tt_matvec_dense_into(a, x, &mut y, &mut ws)?;
    Ok(y)
}

pub fn tt_matvec_dense_into(
    a: &TTOperator,
    x: &[f64],
    y: &mut Vec<f64>,
    ws: &mut MatvecWorkspace,
) -> Result<()> {
    if x.len() != a.cols() {
        return Err(QttError::Shape(format!(
            "vector of length {} applied to an operator with {} columns",
            x.len(),
            a.cols()
        )));
    }
    let rows = a.row_modes();
    let cols = a.col_modes();
    let ranks = a.ranks();
    let d = a.depth();
    let key: Vec<_> = (0..d).map(|k| (ranks[k], rows[k], cols[k], ranks[k + 1])).collect();
    if ws.key != key || ws.cores.len() != d {
        ws.cores = (0..d)
            .map(|k| {
                let c = a.train().core(k);
                let (m, n, r, r2) = (rows[k], cols[k], ranks[k], ranks[k + 1]);
                Mat::from_fn(m * r2, r * n, |row, col| {
                    let (i, ar) = (row % m, row / m);
                    let (al, j) = (col % r, col / r);
                    c.get(al, i + m * j, ar)
                })
            })
            .collect();
        ws.key = key;
    } else {
        // Same shapes, possibly different values.
        for k in 0..d {
            let c = a.train().core(k);
            let (m, r) = (rows[k], ranks[k]);
            let mat = &mut ws.cores[k];
            for col in 0..mat.ncols() {
                for row in 0..mat.nrows() {
                    let (i, ar) = (row % m, row / m);
                    let (al, j) = (col % r, col / r);
                    mat[(row, col)] = c.get(al, i + m * j, ar);
                }
            }
        }
    }
    let par = faer::get_global_parallelism();
    ws.front.clear();
    ws.front.extend_from_slice(x);
    // done = prod of finished row modes, rest = prod of pending column modes.
    let mut done = 1usize;
    let mut rest = x.len();
    for k in 0..d {
        let (m, n, r, r2) = (rows[k], cols[k], ranks[k], ranks[k + 1]);
        rest /= n;
        let kin = r * n;
        let kout = m * r2;
        // front: [done, kin, rest] -> back: [kin, done, rest]
        let src_len = done * kin * rest;
        debug_assert_eq!(ws.front.len(), src_len);
        let contraction_first = if done == 1 {
            &ws.front
        } else {
            ws.back.resize(src_len, 0.0);
            block_transpose(&ws.front, &mut ws.back, done, kin, rest);
            &ws.back
        };
        let mut out = vec![0.0; kout * done * rest];
        faer::linalg::matmul::matmul(
            MatMut::from_column_major_slice_mut(&mut out, kout, done * rest),
            Accum::Replace,
            ws.cores[k].as_ref(),
            MatRef::from_column_major_slice(contraction_first, kin, done * rest),
            1.0,
            par,
        );
        // out: [kout, done, rest] -> front: [done, kout, rest]
        if done == 1 {
            ws.front = out;
        } else {
            ws.front.resize(out.len(), 0.0);
            block_transpose(&out, &mut ws.front, kout, done, rest);
        }
        done *= m;
    }
    y.clear();
    y.extend_from_slice(&ws.front);
    Ok(())
}

/// For each of `blocks` consecutive column-major `p x q` blocks of `src`,
/// writes its transpose into the matching `q x p` block of `dst`.
fn block_transpose(src: &[f64], dst: &mut [f64], p: usize, q: usize, blocks: usize) {
    let size = p * q;
    for (s, t) in src.chunks_exact(size).zip(dst.chunks_exact_mut(size)).take(blocks) {
        MatMut::from_column_major_slice_mut(t, q, p)
            .copy_from(MatRef::from_column_major_slice(s, p, q).transpose());
    }
}

/// Matrix-vector product of a dense vector `x` (scheme order) against a
/// dense matrix, for oracles.
pub fn dense_matvec(m: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let xm = MatRef::from_column_major_slice(x, x.len(), 1);
    let y = m * xm;
    y.col(0).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vector(modes: &[usize], max_rank: usize, rng: &mut impl Rng) -> TTVector {
        let d = modes.len();
        let ranks: Vec<usize> =
            (0..=d).map(|k| if k == 0 || k == d { 1 } else { rng.random_range(1..=max_rank) }).collect();
        TTVector::new(TensorTrain::random(modes, &ranks, rng).unwrap())
    }

    fn random_operator(scheme: &TensorizationScheme, max_rank: usize, rng: &mut impl Rng) -> TTOperator {
        let v = random_vector(&scheme.paired_modes(), max_rank, rng);
        TTOperator::new(v.into_train(), scheme.clone()).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identity_is_identity() {
        let s = TensorizationScheme::morton(1, 2).unwrap();
        let id = tt_identity(&s).unwrap();
        assert_eq!(id.to_matrix().unwrap(), Mat::<f64>::identity(4, 4));
        assert!((id.frobenius_norm() - 2.0).abs() < 1e-14);
        let x = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(tt_matvec_dense(&id, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn add_and_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vector(&[2, 3, 2, 2], 3, &mut rng);
        let zero = TensorTrain::zeros(&[2, 3, 2, 2]).unwrap();
        let s = tt_add(x.train(), &zero).unwrap();
        assert!(rel_err(&s.to_dense().unwrap().into_data(), &x.to_vec().unwrap()) < 1e-15);
        let diff = tt_axpby(1.0, x.train(), -1.0, x.train()).unwrap();
        let r = tt_round(&diff, 1e-12).unwrap();
        assert!(r.frobenius_norm() <= 1e-12 * x.frobenius_norm());
    }

    #[test]
    fn add_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_vector(&[2, 2, 3], 2, &mut rng);
        let y = random_vector(&[2, 2, 3], 3, &mut rng);
        let s = tt_add(x.train(), y.train()).unwrap();
        let want: Vec<f64> =
            x.to_vec().unwrap().iter().zip(y.to_vec().unwrap()).map(|(a, b)| a + b).collect();
        assert!(rel_err(&s.to_dense().unwrap().into_data(), &want) < 1e-12);
    }

    #[test]
    fn dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_vector(&[2, 3, 2], 2, &mut rng);
        let y = random_vector(&[2, 3, 2], 3, &mut rng);
        let xx = tt_dot(&x, &x).unwrap();
        assert!((xx - x.frobenius_norm().powi(2)).abs() < 1e-12 * xx);
        let want: f64 = x.to_vec().unwrap().iter().zip(y.to_vec().unwrap()).map(|(a, b)| a * b).sum();
        assert!((tt_dot(&x, &y).unwrap() - want).abs() < 1e-12 * want.abs().max(1.0));
        let e0 = TTVector::new(TensorTrain::rank_one(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let e1 = TTVector::new(TensorTrain::rank_one(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap());
        assert!(tt_dot(&e0, &e1).unwrap().abs() < 1e-14);
    }

    #[test]
    fn diag_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_vector(&[2, 2, 2], 3, &mut rng);
        let dv = tt_diag(&v).unwrap();
        assert_eq!(dv.ranks(), v.ranks());
        let m = dv.to_matrix().unwrap();
        let vals = v.to_vec().unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { vals[i] } else { 0.0 };
                assert!((m[(i, j)] - want).abs() < 1e-14);
            }
        }
        let ones = tt_diag(&TTVector::new(TensorTrain::ones(&[2, 2]).unwrap())).unwrap();
        assert_eq!(ones.to_matrix().unwrap(), Mat::<f64>::identity(4, 4));
    }

    #[test]
    fn compressed_matvec_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = TensorizationScheme::morton(1, 4).unwrap();
        let a = random_operator(&s, 3, &mut rng);
        let b = random_vector(&[2, 2, 2, 2], 2, &mut rng);
        let raw = tt_matvec_unrounded(&a, &b).unwrap();
        let ra = a.ranks();
        let rb = b.ranks();
        for k in 0..=4 {
            assert_eq!(raw.ranks()[k], ra[k] * rb[k]);
        }
        let want = dense_matvec(a.to_matrix().unwrap().as_ref(), &b.to_vec().unwrap());
        let y = tt_matvec_compressed(&a, &b, 1e-13).unwrap();
        assert!(rel_err(&y.to_vec().unwrap(), &want) < 1e-10);
        let id = tt_identity(&s).unwrap();
        let same = tt_matvec_compressed(&id, &b, 1e-13).unwrap();
        assert!(rel_err(&same.to_vec().unwrap(), &b.to_vec().unwrap()) < 1e-12);
    }

    #[test]
    fn dense_matvec_matches_assembled_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for scheme in [
            TensorizationScheme::morton(1, 5).unwrap(),
            TensorizationScheme::rectangular(vec![2, 3, 2], vec![3, 2, 2]).unwrap(),
            TensorizationScheme::morton_with_leaf(2, 3, 2).unwrap(),
        ] {
            let a = random_operator(&scheme, 4, &mut rng);
            let x: Vec<f64> = (0..a.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = dense_matvec(a.to_matrix().unwrap().as_ref(), &x);
            let got = tt_matvec_dense(&a, &x).unwrap();
            assert!(rel_err(&got, &want) < 1e-12, "{scheme:?}");
        }
    }

    #[test]
    fn dense_matvec_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = TensorizationScheme::morton(3, 2).unwrap();
        let a = random_operator(&s, 5, &mut rng);
        let b1: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
        let lhs = tt_matvec_dense(&a, &sum).unwrap();
        let rhs: Vec<f64> = tt_matvec_dense(&a, &b1)
            .unwrap()
            .iter()
            .zip(tt_matvec_dense(&a, &b2).unwrap())
            .map(|(x, y)| x + y)
            .collect();
        assert!(rel_err(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn matmat_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = TensorizationScheme::morton(1, 3).unwrap();
        let a = random_operator(&s, 3, &mut rng);
        let ai = tt_matmat(&a, &tt_identity(&s).unwrap(), 1e-12).unwrap();
        assert!(ai.ranks().iter().zip(a.ranks()).all(|(x, y)| *x <= y));
        let diff = &ai.to_matrix().unwrap() - &a.to_matrix().unwrap();
        assert!(diff.norm_l2() < 1e-10 * a.frobenius_norm());

        let b = random_vector(&[2, 2, 2], 2, &mut rng);
        let c = random_vector(&[2, 2, 2], 2, &mut rng);
        let bc = tt_matmat(&tt_diag(&b).unwrap(), &tt_diag(&c).unwrap(), 1e-13).unwrap();
        let (bv, cv) = (b.to_vec().unwrap(), c.to_vec().unwrap());
        let m = bc.to_matrix().unwrap();
        for i in 0..8 {
            assert!((m[(i, i)] - bv[i] * cv[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matmat_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = TensorizationScheme::morton(1, 3).unwrap();
        let a = random_operator(&s, 3, &mut rng);
        let b = random_operator(&s, 2, &mut rng);
        let raw = tt_matmat_unrounded(&a, &b).unwrap();
        for k in 0..=3 {
            assert_eq!(raw.ranks()[k], a.ranks()[k] * b.ranks()[k]);
        }
        let want = &a.to_matrix().unwrap() * &b.to_matrix().unwrap();
        let got = tt_matmat(&a, &b, 1e-13).unwrap().to_matrix().unwrap();
        assert!((&got - &want).norm_l2() < 1e-10 * want.norm_l2());
    }

    #[test]
    fn transpose_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = TensorizationScheme::rectangular(vec![2, 3], vec![3, 2]).unwrap();
        let a = random_operator(&s, 3, &mut rng);
        let at = tt_transpose(&a).unwrap();
        assert_eq!(at.to_matrix().unwrap(), a.to_matrix().unwrap().transpose().to_owned());
    }
}
