//! Nyström discretizations of volume integral operators on regular grids.
//!
//! The matrix is `A = a I + B K W C`: `K` holds kernel values between grid
//! points with the self-interaction removed (punctured trapezoidal rule),
//! `W = h^D I` holds the quadrature weights, and `B`, `C` are diagonal
//! coefficient matrices. Rows and columns are in Morton order.

use std::f64::consts::PI;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::cross::EntryOracle;
use crate::error::{QttError, Result};
use crate::tensor::TensorizationScheme;

/// Largest grid for which [`Problem::dense_assemble`] will build the matrix.
pub const DENSE_ASSEMBLY_LIMIT: usize = 4096;

/// Default Gaussian center; off the origin to break the grid's symmetries.
pub const DEFAULT_CENTER: [f64; 3] = [0.1, 0.2, 0.3];

/// A regular grid on `[-1, 1]^D` with cell-centered points
/// `x = -1 + h (k + 1/2)`, `h = 2 / points_per_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "D")]
    pub dims: usize,
    pub points_per_dim: usize,
    /// Bits grouped into the first (leaf) mode; 1 gives uniform binary modes.
    #[serde(default = "one")]
    pub leaf_bits: usize,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl GridSpec {
    pub fn new(dims: usize, points_per_dim: usize) -> Self {
        Self { dims, points_per_dim, leaf_bits: 1 }
    }

    pub fn h(&self) -> f64 {
        2.0 / self.points_per_dim as f64
    }

    pub fn len(&self) -> usize {
        self.points_per_dim.pow(self.dims as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scheme(&self) -> Result<TensorizationScheme> {
        if !self.points_per_dim.is_power_of_two() || self.points_per_dim < 2 {
            return Err(QttError::Argument(format!(
                "points per dimension must be a power of two >= 2, got {}",
                self.points_per_dim
            )));
        }
        let bits = self.points_per_dim.trailing_zeros() as usize;
        TensorizationScheme::morton_with_leaf(self.dims, bits, self.leaf_bits)
    }

    /// Coordinate of grid index `k` along any axis.
    pub fn coordinate(&self, k: usize) -> f64 {
        -1.0 + self.h() * (k as f64 + 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    /// `1 / (4 pi r)`
    LaplaceSingleLayer3D,
    /// `-log(r) / (2 pi)`
    Log2D,
    /// `r^(-p)`
    Power(f64),
}

impl Kernel {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            Kernel::LaplaceSingleLayer3D => 1.0 / (4.0 * PI * r),
            Kernel::Log2D => -r.ln() / (2.0 * PI),
            Kernel::Power(p) => r.powf(-p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Coefficient {
    One,
    /// `1 + exp(-|x - x0|^2)` with the given center.
    Gaussian(Vec<f64>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrature {
    #[default]
    PuncturedTrapezoidal,
}

/// Parameters defining `A = a I + B K W C` on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub grid: GridSpec,
    #[serde(default = "unit")]
    pub a: f64,
    pub kernel: Kernel,
    #[serde(default = "Coefficient::one")]
    pub b_coeff: Coefficient,
    #[serde(default = "Coefficient::one")]
    pub c_coeff: Coefficient,
    #[serde(default = "Quadrature::default")]
    pub quadrature: Quadrature,
    /// Multiplies the integral term; 0 leaves `a I`.
    #[serde(default = "unit")]
    pub kernel_weight: f64,
}

impl Coefficient {
    fn one() -> Self {
        Coefficient::One
    }

    pub fn gaussian_default(dims: usize) -> Self {
        Coefficient::Gaussian(DEFAULT_CENTER[..dims].to_vec())
    }
}

impl ProblemSpec {
    /// Translation-invariant 3D Laplace single layer with `a = 1`.
    pub fn laplace_ti(points_per_dim: usize) -> Self {
        Self {
            grid: GridSpec::new(3, points_per_dim),
            a: 1.0,
            kernel: Kernel::LaplaceSingleLayer3D,
            b_coeff: Coefficient::One,
            c_coeff: Coefficient::One,
            quadrature: Quadrature::PuncturedTrapezoidal,
            kernel_weight: 1.0,
        }
    }

    /// 3D Laplace single layer with Gaussian `b` and `c` at the default center.
    pub fn laplace_nti(points_per_dim: usize) -> Self {
        Self {
            b_coeff: Coefficient::gaussian_default(3),
            c_coeff: Coefficient::gaussian_default(3),
            ..Self::laplace_ti(points_per_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.grid.dims) {
            return Err(QttError::Argument(format!("D must be 1, 2 or 3, got {}", self.grid.dims)));
        }
        self.grid.scheme()?;
        if self.a == 0.0 || !self.a.is_finite() {
            return Err(QttError::Argument(format!(
                "identity coefficient must be finite and non-zero, got {}",
                self.a
            )));
        }
        if !self.kernel_weight.is_finite() {
            return Err(QttError::Argument("kernel_weight must be finite".into()));
        }
        for c in [&self.b_coeff, &self.c_coeff] {
            if let Coefficient::Gaussian(center) = c {
                if center.len() != self.grid.dims {
                    return Err(QttError::Argument(format!(
                        "Gaussian center {center:?} does not have {} coordinates",
                        self.grid.dims
                    )));
                }
                if center.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                    return Err(QttError::Argument(format!(
                        "Gaussian center {center:?} lies outside [-1, 1]^D"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// `1 + exp(-|x - x0|^2)`.
pub fn gaussian_coeff(x: &[f64], x0: &[f64]) -> f64 {
    let r2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 + (-r2).exp()
}

/// The periodic sinc `sin(nu t / 2) / (nu sin(t / 2))`, continued by
/// `(-1)^(k (nu - 1))` at `t = 2 pi k`.
pub fn diric(t: f64, nu: u32) -> f64 {
    let half = t / 2.0;
    let k = (t / (2.0 * PI)).round();
    let s = half.sin();
    if (t - 2.0 * PI * k).abs() < 1e-12 {
        let parity = (k as i64).rem_euclid(2) * (nu as i64 - 1);
        return if parity % 2 == 0 { 1.0 } else { -1.0 };
    }
    (nu as f64 * half).sin() / (nu as f64 * s)
}

/// Samples `f = phi(x) phi(y) phi(z)`, `phi(t) = diric(2 pi t, nu)`, at the
/// grid points in scheme order.
pub fn diric_rhs(grid: &GridSpec, nu: u32) -> Result<Vec<f64>> {
    if nu == 0 {
        return Err(QttError::Argument("nu must be at least 1".into()));
    }
    let scheme = grid.scheme()?;
    let phi: Vec<f64> = (0..grid.points_per_dim)
        .map(|k| diric(2.0 * PI * grid.coordinate(k), nu))
        .collect();
    (0..grid.len())
        .map(|lin| Ok(scheme.index_to_coords(lin)?.iter().map(|&c| phi[c]).product()))
        .collect()
}

/// A validated [`ProblemSpec`] with per-point data precomputed.
#[derive(Clone, Debug)]
pub struct Problem {
    spec: ProblemSpec,
    scheme: TensorizationScheme,
    /// `points[lin * D + axis]`, in scheme order.
    points: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// `b(x_i)` times the kernel weight, and `c(x_j) w_j`.
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        spec.validate()?;
        Self::build(spec)
    }

    fn build(spec: ProblemSpec) -> Result<Self> {
        let scheme = spec.grid.scheme()?;
        let dims = spec.grid.dims;
        let n = spec.grid.len();
        let mut points = Vec::with_capacity(n * dims);
        for lin in 0..n {
            for c in scheme.index_to_coords(lin)? {
                points.push(spec.grid.coordinate(c));
            }
        }
        let coeff = |c: &Coefficient| -> Vec<f64> {
            (0..n)
                .map(|i| match c {
                    Coefficient::One => 1.0,
                    Coefficient::Gaussian(x0) => gaussian_coeff(&points[i * dims..(i + 1) * dims], x0),
                })
                .collect()
        };
        let w = spec.grid.h().powi(dims as i32);
        let b = coeff(&spec.b_coeff);
        let c = coeff(&spec.c_coeff);
        let row_scale = b.iter().map(|v| v * spec.kernel_weight).collect();
        let col_scale = c.iter().map(|v| v * w).collect();
        Ok(Self { spec, scheme, points, b, c, row_scale, col_scale })
    }

    /// The integral part `K W` alone (`a = 0`, unit coefficients), used to
    /// measure the kernel's own rank.
    pub fn kernel_part(&self) -> Result<Self> {
        Self::build(ProblemSpec {
            a: 0.0,
            b_coeff: Coefficient::One,
            c_coeff: Coefficient::One,
            kernel_weight: 1.0,
            ..self.spec.clone()
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn scheme(&self) -> &TensorizationScheme {
        &self.scheme
    }

    pub fn len(&self) -> usize {
        self.row_scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_scale.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.spec.grid.dims;
        &self.points[i * d..(i + 1) * d]
    }

    /// Entry `(i, j)` for scheme-ordered grid indices.
    #[inline]
    pub fn matrix_entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.spec.a;
        }
        let d = self.spec.grid.dims;
        let (xi, xj) = (&self.points[i * d..i * d + d], &self.points[j * d..j * d + d]);
        let r = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        self.row_scale[i] * self.spec.kernel.eval(r) * self.col_scale[j]
    }

    /// Values of `b` at the grid points, in scheme order.
    pub fn b_values(&self) -> &[f64] {
        &self.b
    }

    /// Values of `c` at the grid points, in scheme order.
    pub fn c_values(&self) -> &[f64] {
        &self.c
    }

    pub fn dense_assemble(&self) -> Result<Mat<f64>> {
        let n = self.len();
        if n > DENSE_ASSEMBLY_LIMIT {
            return Err(QttError::Capacity { requested: n, limit: DENSE_ASSEMBLY_LIMIT });
        }
        Ok(Mat::from_fn(n, n, |i, j| self.matrix_entry(i, j)))
    }

    pub fn oracle(&self) -> OperatorOracle<'_> {
        OperatorOracle { problem: self, modes: self.scheme.paired_modes() }
    }
}

/// Entry function over operator multi-indices, for cross approximation.
pub struct OperatorOracle<'a> {
    problem: &'a Problem,
    modes: Vec<usize>,
}

impl EntryOracle for OperatorOracle<'_> {
    fn modes(&self) -> &[usize] {
        &self.modes
    }

    fn entry(&self, idx: &[usize]) -> f64 {
        let (i, j) = self
            .problem
            .scheme
            .operator_multi_to_rc(idx)
            .expect("multi-index within operator modes");
        self.problem.matrix_entry(i, j)
    }
}
