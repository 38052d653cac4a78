//! Full (uncompressed) tensors, used as oracles and for small problems.

use faer::{Mat, MatRef};

use crate::error::{QttError, Result};
use crate::tensor::scheme::{join_digits, split_digits};

/// Default cap on the number of scalars a densification may produce.
pub const DEFAULT_DENSE_GUARD: usize = 1 << 24;

/// A full tensor stored with the first mode varying fastest, so the flat
/// position of `(i_1, ..., i_d)` is the mixed-radix linear index used by
/// [`TensorizationScheme`](crate::tensor::TensorizationScheme).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    data: Vec<f64>,
    modes: Vec<usize>,
}

impl DenseTensor {
    pub fn new(data: Vec<f64>, modes: Vec<usize>) -> Result<Self> {
        if modes.is_empty() || modes.contains(&0) {
            return Err(QttError::Argument(format!("invalid modes {modes:?}")));
        }
        let expected: usize = modes.iter().product();
        if data.len() != expected {
            return Err(QttError::Shape(format!(
                "{} values supplied for modes {modes:?} ({expected} expected)",
                data.len()
            )));
        }
        Ok(Self { data, modes })
    }

    pub fn zeros(modes: Vec<usize>) -> Result<Self> {
        let n = modes.iter().product();
        Self::new(vec![0.0; n], modes)
    }

    pub fn from_fn(modes: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n: usize = modes.iter().product();
        let data = (0..n).map(|lin| f(&split_digits(lin, &modes))).collect();
        Self::new(data, modes)
    }

    /// Tensorizes an `rows x cols` matrix whose rows and columns are already
    /// in scheme order. Mode `k` of the result is the pair `i_k + m_k * j_k`.
    pub fn from_matrix(
        matrix: MatRef<'_, f64>,
        row_modes: &[usize],
        col_modes: &[usize],
    ) -> Result<Self> {
        let rows: usize = row_modes.iter().product();
        let cols: usize = col_modes.iter().product();
        if row_modes.len() != col_modes.len() || matrix.nrows() != rows || matrix.ncols() != cols {
            return Err(QttError::Shape(format!(
                "{}x{} matrix does not match modes {row_modes:?} x {col_modes:?}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let modes: Vec<usize> = row_modes.iter().zip(col_modes).map(|(m, n)| m * n).collect();
        let total = rows * cols;
        let mut data = vec![0.0; total];
        let row_offsets = pair_offsets(row_modes, col_modes, true);
        let col_offsets = pair_offsets(row_modes, col_modes, false);
        for c in 0..cols {
            let co = col_offsets[c];
            for r in 0..rows {
                data[row_offsets[r] + co] = matrix[(r, c)];
            }
        }
        Self::new(data, modes)
    }

    /// Inverse of [`from_matrix`](Self::from_matrix).
    pub fn to_matrix(&self, row_modes: &[usize], col_modes: &[usize]) -> Result<Mat<f64>> {
        let paired: Vec<usize> = row_modes.iter().zip(col_modes).map(|(m, n)| m * n).collect();
        if paired != self.modes {
            return Err(QttError::Shape(format!(
                "modes {:?} are not the pairs {row_modes:?} x {col_modes:?}",
                self.modes
            )));
        }
        let rows: usize = row_modes.iter().product();
        let cols: usize = col_modes.iter().product();
        let row_offsets = pair_offsets(row_modes, col_modes, true);
        let col_offsets = pair_offsets(row_modes, col_modes, false);
        Ok(Mat::from_fn(rows, cols, |r, c| self.data[row_offsets[r] + col_offsets[c]]))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn modes(&self) -> &[usize] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, multi: &[usize]) -> Result<f64> {
        Ok(self.data[join_digits(multi, &self.modes)?])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The `k`-th unfolding: rows flatten the first `k` digits, columns the
    /// remaining ones, both with the earlier digit varying fastest.
    pub fn unfold(&self, k: usize) -> Result<Mat<f64>> {
        let d = self.modes.len();
        if k == 0 || k >= d {
            return Err(QttError::Argument(format!(
                "unfolding level {k} outside 1..={}",
                d.saturating_sub(1)
            )));
        }
        let rows: usize = self.modes[..k].iter().product();
        let cols = self.data.len() / rows;
        Ok(MatRef::from_column_major_slice(&self.data, rows, cols).to_owned())
    }
}

/// Offset of each row (`rows == true`) or column index inside the paired
/// tensor: digit `k` has stride `P_k` for rows and `m_k * P_k` for columns,
/// where `P_k` is the product of the earlier paired modes.
fn pair_offsets(row_modes: &[usize], col_modes: &[usize], rows: bool) -> Vec<usize> {
    let own = if rows { row_modes } else { col_modes };
    let mut offsets = vec![0usize];
    let mut block = 1usize;
    for (&m, &n) in row_modes.iter().zip(col_modes) {
        let own_n = if rows { m } else { n };
        let stride = if rows { block } else { block * m };
        let prev = std::mem::take(&mut offsets);
        offsets.reserve(prev.len() * own_n);
        for digit in 0..own_n {
            offsets.extend(prev.iter().map(|&o| o + digit * stride));
        }
        block *= m * n;
    }
    debug_assert_eq!(offsets.len(), own.iter().product::<usize>());
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_unfolding_of_index_tensor() {
        let t = DenseTensor::from_fn(vec![2, 2, 2], |m| (m[0] + 2 * m[1] + 4 * m[2]) as f64).unwrap();
        let u = t.unfold(1).unwrap();
        assert_eq!((u.nrows(), u.ncols()), (2, 4));
        for p in 0..2 {
            for q in 0..4 {
                assert_eq!(u[(p, q)], (p + 2 * q) as f64);
            }
        }
    }

    #[test]
    fn unfold_rejects_bad_level() {
        let t = DenseTensor::zeros(vec![2, 2, 2]).unwrap();
        assert!(matches!(t.unfold(0), Err(QttError::Argument(_))));
        assert!(matches!(t.unfold(3), Err(QttError::Argument(_))));
    }

    #[test]
    fn rank_one_unfoldings() {
        let u = [1.0, -2.0];
        let v = [0.5, 3.0, 1.0];
        let w = [2.0, 4.0];
        let t = DenseTensor::from_fn(vec![2, 3, 2], |m| u[m[0]] * v[m[1]] * w[m[2]]).unwrap();
        for k in 1..3 {
            let s = t.unfold(k).unwrap().singular_values().unwrap();
            assert!(s[1] <= 1e-12 * s[0]);
        }
    }

    #[test]
    fn matrix_round_trip() {
        let rows = [2usize, 3];
        let cols = [3usize, 2];
        let m = Mat::from_fn(6, 6, |r, c| (r * 10 + c) as f64);
        let t = DenseTensor::from_matrix(m.as_ref(), &rows, &cols).unwrap();
        assert_eq!(t.modes(), &[6, 6]);
        // Entry (row 4, col 3): row digits (0, 2), col digits (0, 1), pairs (0, 2 + 3).
        assert_eq!(t.get(&[0, 2 + 3]).unwrap(), 43.0);
        let back = t.to_matrix(&rows, &cols).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(DenseTensor::new(vec![1.0; 5], vec![2, 2]).is_err());
    }
}
