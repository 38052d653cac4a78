//! Tensor-train containers.
//!
//! A core `G_k` has shape `(r_{k-1}, n_k, r_k)` and is stored row-major:
//! the left bond index varies slowest and the right bond index fastest.
//! The same buffer is therefore both the `(r_{k-1} n_k) x r_k` "left
//! unfolding" and the `r_{k-1} x (n_k r_k)` "right unfolding" of the core.

use faer::{Accum, Mat, MatRef, Par};

use crate::error::{QttError, Result};
use crate::tensor::dense::{DenseTensor, DEFAULT_DENSE_GUARD};
use crate::tensor::scheme::TensorizationScheme;

#[derive(Clone, Debug, PartialEq)]
pub struct Core {
    left: usize,
    mode: usize,
    right: usize,
    data: Vec<f64>,
}

impl Core {
    pub fn new(left: usize, mode: usize, right: usize, data: Vec<f64>) -> Result<Self> {
        if left == 0 || mode == 0 || right == 0 {
            return Err(QttError::Shape(format!("empty core ({left}, {mode}, {right})")));
        }
        if data.len() != left * mode * right {
            return Err(QttError::Shape(format!(
                "core ({left}, {mode}, {right}) given {} values",
                data.len()
            )));
        }
        Ok(Self { left, mode, right, data })
    }

    pub fn zeros(left: usize, mode: usize, right: usize) -> Self {
        Self { left, mode, right, data: vec![0.0; left * mode * right] }
    }

    pub fn from_fn(
        left: usize,
        mode: usize,
        right: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(left * mode * right);
        for a in 0..left {
            for i in 0..mode {
                for b in 0..right {
                    data.push(f(a, i, b));
                }
            }
        }
        Self { left, mode, right, data }
    }

    /// Builds a core from its `(left * mode) x right` unfolding.
    pub fn from_left_matrix(m: MatRef<'_, f64>, left: usize, mode: usize) -> Result<Self> {
        if m.nrows() != left * mode {
            return Err(QttError::Shape(format!(
                "{} rows cannot form a core with left rank {left} and mode {mode}",
                m.nrows()
            )));
        }
        let right = m.ncols();
        let mut data = vec![0.0; left * mode * right];
        let mut dst = faer::MatMut::from_row_major_slice_mut(&mut data, left * mode, right);
        dst.copy_from(m);
        Self::new(left, mode, right, data)
    }

    /// Builds a core from its `left x (mode * right)` unfolding.
    pub fn from_right_matrix(m: MatRef<'_, f64>, mode: usize, right: usize) -> Result<Self> {
        if m.ncols() != mode * right {
            return Err(QttError::Shape(format!(
                "{} columns cannot form a core with mode {mode} and right rank {right}",
                m.ncols()
            )));
        }
        let left = m.nrows();
        let mut data = vec![0.0; left * mode * right];
        let mut dst = faer::MatMut::from_row_major_slice_mut(&mut data, left, mode * right);
        dst.copy_from(m);
        Self::new(left, mode, right, data)
    }

    pub fn left_rank(&self) -> usize {
        self.left
    }

    pub fn mode(&self) -> usize {
        self.mode
    }

    pub fn right_rank(&self) -> usize {
        self.right
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, a: usize, i: usize, b: usize) -> f64 {
        self.data[(a * self.mode + i) * self.right + b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, i: usize, b: usize, v: f64) {
        self.data[(a * self.mode + i) * self.right + b] = v;
    }

    pub fn as_left_matrix(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.left * self.mode, self.right)
    }

    pub fn as_right_matrix(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.left, self.mode * self.right)
    }

    /// The `left x right` matrix `G_k(:, i, :)`.
    pub fn slice(&self, i: usize) -> MatRef<'_, f64> {
        let row_stride = (self.mode * self.right) as isize;
        MatRef::from_row_major_slice_with_stride(
            &self.data[i * self.right..],
            self.left,
            self.right,
            row_stride as usize,
        )
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }
}

/// A chain of cores with boundary ranks `r_0 = r_d = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorTrain {
    cores: Vec<Core>,
}

impl TensorTrain {
    pub fn new(cores: Vec<Core>) -> Result<Self> {
        if cores.is_empty() {
            return Err(QttError::Shape("a tensor train needs at least one core".into()));
        }
        if cores[0].left != 1 || cores[cores.len() - 1].right != 1 {
            return Err(QttError::Shape(format!(
                "boundary ranks must be 1, got {} and {}",
                cores[0].left,
                cores[cores.len() - 1].right
            )));
        }
        for (k, pair) in cores.windows(2).enumerate() {
            if pair[0].right != pair[1].left {
                return Err(QttError::Shape(format!(
                    "bond {}: core {k} has right rank {} but core {} has left rank {}",
                    k + 1,
                    pair[0].right,
                    k + 1,
                    pair[1].left
                )));
            }
        }
        Ok(Self { cores })
    }

    /// Rank-one train with the given per-mode factors.
    pub fn rank_one(factors: &[Vec<f64>]) -> Result<Self> {
        let cores = factors
            .iter()
            .map(|f| Core::new(1, f.len(), 1, f.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cores)
    }

    pub fn ones(modes: &[usize]) -> Result<Self> {
        let factors: Vec<Vec<f64>> = modes.iter().map(|&n| vec![1.0; n]).collect();
        Self::rank_one(&factors)
    }

    pub fn zeros(modes: &[usize]) -> Result<Self> {
        let factors: Vec<Vec<f64>> = modes.iter().map(|&n| vec![0.0; n]).collect();
        Self::rank_one(&factors)
    }

    /// Train with the given ranks `r_0..r_d` and entries uniform in [-1, 1).
    pub fn random(modes: &[usize], ranks: &[usize], rng: &mut impl rand::Rng) -> Result<Self> {
        if ranks.len() != modes.len() + 1 {
            return Err(QttError::Shape(format!(
                "{} ranks given for {} modes",
                ranks.len(),
                modes.len()
            )));
        }
        let cores = (0..modes.len())
            .map(|k| {
                Core::from_fn(ranks[k], modes[k], ranks[k + 1], |_, _, _| {
                    rng.random_range(-1.0..1.0)
                })
            })
            .collect();
        Self::new(cores)
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [Core] {
        &mut self.cores
    }

    pub fn into_cores(self) -> Vec<Core> {
        self.cores
    }

    pub fn core(&self, k: usize) -> &Core {
        &self.cores[k]
    }

    pub fn depth(&self) -> usize {
        self.cores.len()
    }

    pub fn modes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.mode).collect()
    }

    /// `r_0, ..., r_d`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.cores.iter().map(|c| c.left).collect();
        r.push(1);
        r
    }

    pub fn max_rank(&self) -> usize {
        self.ranks().into_iter().max().unwrap_or(1)
    }

    /// Number of scalars in the full tensor.
    pub fn full_size(&self) -> usize {
        self.cores.iter().map(|c| c.mode).product()
    }

    /// Bytes of core payload (`f64` entries only).
    pub fn payload_bytes(&self) -> usize {
        self.cores.iter().map(|c| c.data.len()).sum::<usize>() * std::mem::size_of::<f64>()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.cores[0].scale(alpha);
    }

    /// Evaluates `G_1(i_1) G_2(i_2) ... G_d(i_d)`.
    pub fn entry(&self, idx: &[usize]) -> Result<f64> {
        if idx.len() != self.cores.len() {
            return Err(QttError::Shape(format!(
                "multi-index has {} digits, train has {} cores",
                idx.len(),
                self.cores.len()
            )));
        }
        let mut row = vec![1.0];
        let mut next = Vec::new();
        for (core, &i) in self.cores.iter().zip(idx) {
            if i >= core.mode {
                return Err(QttError::Range { index: i, extent: core.mode });
            }
            next.clear();
            next.resize(core.right, 0.0);
            for (a, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let base = (a * core.mode + i) * core.right;
                for (n, &g) in next.iter_mut().zip(&core.data[base..base + core.right]) {
                    *n += w * g;
                }
            }
            std::mem::swap(&mut row, &mut next);
        }
        Ok(row[0])
    }

    pub fn to_dense(&self) -> Result<DenseTensor> {
        self.to_dense_with_guard(DEFAULT_DENSE_GUARD)
    }

    /// Contracts the whole train. Fails if the result would exceed `guard`
    /// scalars.
    pub fn to_dense_with_guard(&self, guard: usize) -> Result<DenseTensor> {
        let total = self
            .cores
            .iter()
            .try_fold(1usize, |acc, c| acc.checked_mul(c.mode))
            .unwrap_or(usize::MAX);
        if total > guard {
            return Err(QttError::Capacity { requested: total, limit: guard });
        }
        // `acc` holds the first k cores contracted: rows = (i_1..i_k), first
        // digit fastest; columns = r_k.
        let mut acc = Mat::<f64>::from_fn(1, 1, |_, _| 1.0);
        for core in &self.cores {
            let rows = acc.nrows();
            let mut next = Mat::<f64>::zeros(rows * core.mode, core.right);
            for i in 0..core.mode {
                faer::linalg::matmul::matmul(
                    next.as_mut().subrows_mut(i * rows, rows),
                    Accum::Replace,
                    acc.as_ref(),
                    core.slice(i),
                    1.0,
                    Par::Seq,
                );
            }
            acc = next;
        }
        let data = acc.col(0).iter().copied().collect();
        DenseTensor::new(data, self.modes())
    }

    /// `||vec(x)||_2` via successive Gram contractions.
    pub fn frobenius_norm(&self) -> f64 {
        self.dot(self).unwrap_or(0.0).max(0.0).sqrt()
    }

    /// Inner product of the vectorizations, computed core by core.
    pub fn dot(&self, other: &TensorTrain) -> Result<f64> {
        if self.modes() != other.modes() {
            return Err(QttError::Shape(format!(
                "modes {:?} and {:?} differ",
                self.modes(),
                other.modes()
            )));
        }
        // gram(a, b) = sum over the leading digits of x(.., a) y(.., b)
        let mut gram = Mat::<f64>::from_fn(1, 1, |_, _| 1.0);
        for (x, y) in self.cores.iter().zip(&other.cores) {
            // t(a, (i, b')) = sum_b gram(a, b) Y(b, i, b')
            let mut t = vec![0.0; x.left * y.mode * y.right];
            faer::linalg::matmul::matmul(
                faer::MatMut::from_row_major_slice_mut(&mut t, x.left, y.mode * y.right),
                Accum::Replace,
                gram.as_ref(),
                y.as_right_matrix(),
                1.0,
                Par::Seq,
            );
            let t_left = MatRef::from_row_major_slice(&t, x.left * x.mode, y.right);
            let mut next = Mat::<f64>::zeros(x.right, y.right);
            faer::linalg::matmul::matmul(
                next.as_mut(),
                Accum::Replace,
                x.as_left_matrix().transpose(),
                t_left,
                1.0,
                Par::Seq,
            );
            gram = next;
        }
        Ok(gram[(0, 0)])
    }
}

/// A tensorized vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TTVector {
    train: TensorTrain,
}

impl TTVector {
    pub fn new(train: TensorTrain) -> Self {
        Self { train }
    }

    pub fn train(&self) -> &TensorTrain {
        &self.train
    }

    pub fn train_mut(&mut self) -> &mut TensorTrain {
        &mut self.train
    }

    pub fn into_train(self) -> TensorTrain {
        self.train
    }

    pub fn modes(&self) -> Vec<usize> {
        self.train.modes()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.train.ranks()
    }

    pub fn max_rank(&self) -> usize {
        self.train.max_rank()
    }

    pub fn len(&self) -> usize {
        self.train.full_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, idx: &[usize]) -> Result<f64> {
        self.train.entry(idx)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.train.frobenius_norm()
    }

    /// Full vector in scheme order.
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.train.to_dense()?.into_data())
    }
}

impl From<TensorTrain> for TTVector {
    fn from(train: TensorTrain) -> Self {
        Self::new(train)
    }
}

/// A tensorized matrix. Core `k` has middle index `i_k + m_k * j_k`, with
/// `i_k` the row (target) digit and `j_k` the column (source) digit.
#[derive(Clone, Debug, PartialEq)]
pub struct TTOperator {
    train: TensorTrain,
    scheme: TensorizationScheme,
}

impl TTOperator {
    pub fn new(train: TensorTrain, scheme: TensorizationScheme) -> Result<Self> {
        if train.modes() != scheme.paired_modes() {
            return Err(QttError::Shape(format!(
                "core modes {:?} do not match scheme pairs {:?}",
                train.modes(),
                scheme.paired_modes()
            )));
        }
        Ok(Self { train, scheme })
    }

    pub fn train(&self) -> &TensorTrain {
        &self.train
    }

    pub fn train_mut(&mut self) -> &mut TensorTrain {
        &mut self.train
    }

    pub fn into_train(self) -> TensorTrain {
        self.train
    }

    pub fn scheme(&self) -> &TensorizationScheme {
        &self.scheme
    }

    /// Replaces the scheme by one with identical operator modes (for
    /// example to restore grid geometry after reading a file).
    pub fn with_scheme(self, scheme: TensorizationScheme) -> Result<Self> {
        Self::new(self.train, scheme)
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.train.ranks()
    }

    pub fn max_rank(&self) -> usize {
        self.train.max_rank()
    }

    pub fn depth(&self) -> usize {
        self.train.depth()
    }

    pub fn row_modes(&self) -> Vec<usize> {
        self.scheme.row_modes()
    }

    pub fn col_modes(&self) -> Vec<usize> {
        self.scheme.col_modes()
    }

    pub fn rows(&self) -> usize {
        self.scheme.rows()
    }

    pub fn cols(&self) -> usize {
        self.scheme.cols()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.train.frobenius_norm()
    }

    /// Matrix entry at scheme-ordered `(row, col)`.
    pub fn entry(&self, row: usize, col: usize) -> Result<f64> {
        self.train.entry(&self.scheme.rc_to_operator_multi(row, col)?)
    }

    pub fn to_dense(&self) -> Result<DenseTensor> {
        self.train.to_dense()
    }

    /// Dense `rows x cols` matrix with rows and columns in scheme order.
    pub fn to_matrix(&self) -> Result<Mat<f64>> {
        self.to_matrix_with_guard(DEFAULT_DENSE_GUARD)
    }

    pub fn to_matrix_with_guard(&self, guard: usize) -> Result<Mat<f64>> {
        self.train
            .to_dense_with_guard(guard)?
            .to_matrix(&self.row_modes(), &self.col_modes())
    }
}
