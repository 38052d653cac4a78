//! Bijections between linear grid indices and hierarchical multi-indices.
//!
//! Digits are stored finest level first: `i_1` selects among the leaf samples
//! and `i_d` is the branch taken at the root. The linear index is the
//! mixed-radix number `i_1 + n_1 * (i_2 + n_2 * (...))`, so for binary modes
//! `i_1` is its least-significant bit.
//!
//! For grids in `D > 1` dimensions the binary digits of the linear index are
//! the Morton (Z-order) interleaving of the coordinate bits, cycling through
//! the axes in the fixed order x, y, z at every refinement level.

use serde::{Deserialize, Serialize};

use crate::error::{QttError, Result};

/// Upper bound on any single mode size.
pub const MAX_MODE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ordering {
    MortonInterleaved,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorizationScheme {
    spatial_dims: usize,
    vector_modes: Vec<usize>,
    operator_modes: Vec<(usize, usize)>,
    ordering: Ordering,
}

impl TensorizationScheme {
    /// Uniform binary refinement of a `D`-dimensional grid with
    /// `2^bits_per_dim` points per axis.
    pub fn morton(spatial_dims: usize, bits_per_dim: usize) -> Result<Self> {
        Self::morton_with_leaf(spatial_dims, bits_per_dim, 1)
    }

    /// Like [`morton`](Self::morton), but the first (leaf) mode groups
    /// `leaf_bits` consecutive Morton bits, giving `n_1 = 2^leaf_bits`
    /// samples per leaf box.
    pub fn morton_with_leaf(
        spatial_dims: usize,
        bits_per_dim: usize,
        leaf_bits: usize,
    ) -> Result<Self> {
        if !(1..=3).contains(&spatial_dims) {
            return Err(QttError::Argument(format!(
                "spatial dimension must be 1, 2 or 3, got {spatial_dims}"
            )));
        }
        let total = spatial_dims * bits_per_dim;
        if bits_per_dim == 0 || leaf_bits == 0 || leaf_bits > total || (1usize << leaf_bits) > MAX_MODE {
            return Err(QttError::Argument(format!(
                "invalid refinement: {bits_per_dim} bits per axis with {leaf_bits} leaf bits"
            )));
        }
        let mut modes = vec![1usize << leaf_bits];
        modes.extend(std::iter::repeat_n(2, total - leaf_bits));
        Ok(Self::square(spatial_dims, modes))
    }

    /// One-dimensional mixed-radix scheme with arbitrary mode sizes.
    pub fn from_modes(modes: Vec<usize>) -> Result<Self> {
        check_modes(&modes)?;
        Ok(Self::square(1, modes))
    }

    /// Scheme for a (possibly rectangular) operator with the given row and
    /// column mode sizes. Vectors it acts on use the column modes.
    pub fn rectangular(row_modes: Vec<usize>, col_modes: Vec<usize>) -> Result<Self> {
        check_modes(&row_modes)?;
        check_modes(&col_modes)?;
        if row_modes.len() != col_modes.len() {
            return Err(QttError::Shape(format!(
                "row depth {} differs from column depth {}",
                row_modes.len(),
                col_modes.len()
            )));
        }
        Ok(Self {
            spatial_dims: 1,
            operator_modes: row_modes.iter().copied().zip(col_modes.iter().copied()).collect(),
            vector_modes: col_modes,
            ordering: Ordering::MortonInterleaved,
        })
    }

    fn square(spatial_dims: usize, modes: Vec<usize>) -> Self {
        Self {
            spatial_dims,
            operator_modes: modes.iter().map(|&n| (n, n)).collect(),
            vector_modes: modes,
            ordering: Ordering::MortonInterleaved,
        }
    }

    pub fn spatial_dims(&self) -> usize {
        self.spatial_dims
    }

    pub fn depth(&self) -> usize {
        self.vector_modes.len()
    }

    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    pub fn vector_modes(&self) -> &[usize] {
        &self.vector_modes
    }

    pub fn operator_modes(&self) -> &[(usize, usize)] {
        &self.operator_modes
    }

    pub fn row_modes(&self) -> Vec<usize> {
        self.operator_modes.iter().map(|m| m.0).collect()
    }

    pub fn col_modes(&self) -> Vec<usize> {
        self.operator_modes.iter().map(|m| m.1).collect()
    }

    /// Flattened operator mode sizes `m_k * n_k`.
    pub fn paired_modes(&self) -> Vec<usize> {
        self.operator_modes.iter().map(|&(m, n)| m * n).collect()
    }

    /// Total number of points `N`.
    pub fn len(&self) -> usize {
        self.vector_modes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.operator_modes.iter().map(|m| m.0).product()
    }

    pub fn cols(&self) -> usize {
        self.operator_modes.iter().map(|m| m.1).product()
    }

    pub fn is_square(&self) -> bool {
        self.operator_modes.iter().all(|&(m, n)| m == n)
    }

    /// Splits a linear index into its digits, finest level first.
    pub fn index_to_multi(&self, linear: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if linear >= n {
            return Err(QttError::Range { index: linear, extent: n });
        }
        Ok(split_digits(linear, &self.vector_modes))
    }

    pub fn multi_to_index(&self, multi: &[usize]) -> Result<usize> {
        join_digits(multi, &self.vector_modes)
    }

    /// Row and column of the matrix entry addressed by an operator
    /// multi-index whose `k`-th entry is the flattened pair `i_k + m_k * j_k`.
    pub fn operator_multi_to_rc(&self, multi: &[usize]) -> Result<(usize, usize)> {
        if multi.len() != self.depth() {
            return Err(QttError::Shape(format!(
                "multi-index has {} digits, scheme depth is {}",
                multi.len(),
                self.depth()
            )));
        }
        let (mut row, mut col, mut rs, mut cs) = (0, 0, 1, 1);
        for (&b, &(m, n)) in multi.iter().zip(&self.operator_modes) {
            if b >= m * n {
                return Err(QttError::Range { index: b, extent: m * n });
            }
            row += (b % m) * rs;
            col += (b / m) * cs;
            rs *= m;
            cs *= n;
        }
        Ok((row, col))
    }

    pub fn rc_to_operator_multi(&self, row: usize, col: usize) -> Result<Vec<usize>> {
        if row >= self.rows() {
            return Err(QttError::Range { index: row, extent: self.rows() });
        }
        if col >= self.cols() {
            return Err(QttError::Range { index: col, extent: self.cols() });
        }
        let (mut row, mut col) = (row, col);
        Ok(self
            .operator_modes
            .iter()
            .map(|&(m, n)| {
                let b = row % m + m * (col % n);
                row /= m;
                col /= n;
                b
            })
            .collect())
    }

    /// Number of grid points along each axis, when the scheme describes a
    /// regular grid (all modes powers of two, bit count divisible by `D`).
    pub fn points_per_dim(&self) -> Result<usize> {
        let bits = self.total_bits()?;
        if bits % self.spatial_dims != 0 {
            return Err(QttError::Argument(format!(
                "{bits} bits cannot be split over {} axes",
                self.spatial_dims
            )));
        }
        Ok(1usize << (bits / self.spatial_dims))
    }

    fn total_bits(&self) -> Result<usize> {
        self.vector_modes
            .iter()
            .map(|&n| {
                if n.is_power_of_two() {
                    Ok(n.trailing_zeros() as usize)
                } else {
                    Err(QttError::Argument(format!("mode {n} is not a power of two")))
                }
            })
            .sum()
    }

    /// Grid coordinates (x, y, z, ...) of a linear index.
    pub fn index_to_coords(&self, linear: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if linear >= n {
            return Err(QttError::Range { index: linear, extent: n });
        }
        let bits = self.total_bits()?;
        let dims = self.spatial_dims;
        let mut coords = vec![0usize; dims];
        for p in 0..bits {
            coords[p % dims] |= ((linear >> p) & 1) << (p / dims);
        }
        Ok(coords)
    }

    pub fn coords_to_index(&self, coords: &[usize]) -> Result<usize> {
        let dims = self.spatial_dims;
        if coords.len() != dims {
            return Err(QttError::Shape(format!(
                "expected {dims} coordinates, got {}",
                coords.len()
            )));
        }
        let side = self.points_per_dim()?;
        let bits = self.total_bits()?;
        for &c in coords {
            if c >= side {
                return Err(QttError::Range { index: c, extent: side });
            }
        }
        let mut linear = 0usize;
        for p in 0..bits {
            linear |= ((coords[p % dims] >> (p / dims)) & 1) << p;
        }
        Ok(linear)
    }
}

fn check_modes(modes: &[usize]) -> Result<()> {
    if modes.is_empty() {
        return Err(QttError::Argument("scheme needs at least one mode".into()));
    }
    if let Some(&bad) = modes.iter().find(|&&n| n == 0 || n > MAX_MODE) {
        return Err(QttError::Argument(format!("mode size {bad} outside 1..={MAX_MODE}")));
    }
    Ok(())
}

/// Mixed-radix digits of `linear`, least significant (first mode) first.
pub(crate) fn split_digits(mut linear: usize, modes: &[usize]) -> Vec<usize> {
    modes
        .iter()
        .map(|&n| {
            let digit = linear % n;
            linear /= n;
            digit
        })
        .collect()
}

pub(crate) fn join_digits(multi: &[usize], modes: &[usize]) -> Result<usize> {
    if multi.len() != modes.len() {
        return Err(QttError::Shape(format!(
            "multi-index has {} digits, expected {}",
            multi.len(),
            modes.len()
        )));
    }
    let mut linear = 0usize;
    let mut stride = 1usize;
    for (&digit, &n) in multi.iter().zip(modes) {
        if digit >= n {
            return Err(QttError::Range { index: digit, extent: n });
        }
        linear += digit * stride;
        stride *= n;
    }
    Ok(linear)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_digits_are_finest_first() {
        let s = TensorizationScheme::morton(1, 3).unwrap();
        assert_eq!(s.index_to_multi(5).unwrap(), vec![1, 0, 1]);
        assert_eq!(s.index_to_multi(6).unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn round_trip_small() {
        let s = TensorizationScheme::morton(3, 2).unwrap();
        for linear in 0..64 {
            let multi = s.index_to_multi(linear).unwrap();
            assert_eq!(s.multi_to_index(&multi).unwrap(), linear);
        }
    }

    #[test]
    fn morton_interleaves_x_y_z() {
        let s = TensorizationScheme::morton(3, 3).unwrap();
        // x = 0b001, y = 0b010, z = 0b100 (bits listed finest first below).
        let linear = s.coords_to_index(&[1, 2, 4]).unwrap();
        assert_eq!(
            s.index_to_multi(linear).unwrap(),
            vec![1, 0, 0, 0, 1, 0, 0, 0, 1]
        );
        assert_eq!(s.index_to_coords(linear).unwrap(), vec![1, 2, 4]);
        // First digit toggles x, second y, third z.
        assert_eq!(s.index_to_coords(1).unwrap(), vec![1, 0, 0]);
        assert_eq!(s.index_to_coords(2).unwrap(), vec![0, 1, 0]);
        assert_eq!(s.index_to_coords(4).unwrap(), vec![0, 0, 1]);
        assert_eq!(s.index_to_coords(8).unwrap(), vec![2, 0, 0]);
    }

    #[test]
    fn leaf_mode_groups_bits() {
        let s = TensorizationScheme::morton_with_leaf(3, 2, 3).unwrap();
        assert_eq!(s.vector_modes(), &[8, 2, 2, 2]);
        assert_eq!(s.len(), 64);
        assert_eq!(s.points_per_dim().unwrap(), 4);
        assert_eq!(s.index_to_multi(13).unwrap(), vec![5, 1, 0, 0]);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let s = TensorizationScheme::morton(1, 3).unwrap();
        assert!(matches!(s.index_to_multi(8), Err(QttError::Range { .. })));
        assert!(matches!(s.multi_to_index(&[0, 2, 0]), Err(QttError::Range { .. })));
        assert!(s.coords_to_index(&[8]).is_err());
    }

    #[test]
    fn operator_pairs_round_trip() {
        let s = TensorizationScheme::rectangular(vec![2, 3], vec![3, 2]).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                let multi = s.rc_to_operator_multi(row, col).unwrap();
                assert_eq!(s.operator_multi_to_rc(&multi).unwrap(), (row, col));
            }
        }
    }

    #[test]
    fn rejects_bad_modes() {
        assert!(TensorizationScheme::from_modes(vec![]).is_err());
        assert!(TensorizationScheme::from_modes(vec![2, 0]).is_err());
        assert!(TensorizationScheme::from_modes(vec![257]).is_err());
        assert!(TensorizationScheme::morton(4, 2).is_err());
    }
}
