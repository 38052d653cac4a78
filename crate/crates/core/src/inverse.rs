//! Approximate inversion of TT operators by alternating local solves.
//!
//! The unknown inverse `X` is treated as a train whose k-th core
//! `W_k(g, j + m p, g')` carries the row digit `j` and column digit `p` of
//! `X`. Fixing all cores but one turns `(I (x) A) vec(X) = vec(I)` into a
//! small system that is block diagonal in `p`; the interface stacks hold the
//! partial contractions needed to form it in time independent of `N`.

use std::time::Instant;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arith::{tt_add, tt_identity, tt_matmat, tt_matvec_dense_into, MatvecWorkspace};
use crate::compress::{orthogonalize_right, tt_round, tt_round_capped};
use crate::error::{QttError, Result};
use crate::krylov::{gmres_from, GmresConfig};
use crate::linalg::{qr_orthonormalize, truncated_svd, LuFactors};
use crate::tensor::{Core, TTOperator, TensorTrain};

/// Largest number of GMRES iterations spent on one local system.
const LOCAL_MAX_ITERS: usize = 150;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LocalSolver {
    /// Direct LU up to `local_dense_threshold` unknowns, GMRES beyond.
    Dense,
    /// Always GMRES on the structured local operator.
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum InverseMode {
    /// One core at a time with fixed ranks.
    Als,
    /// Two neighbouring cores solved jointly and re-split.
    Dmrg,
    /// One core at a time plus residual enrichment (AMEn).
    DmrgPlusEnrich,
}

impl std::str::FromStr for InverseMode {
    type Err = QttError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "als" => Ok(Self::Als),
            "dmrg" => Ok(Self::Dmrg),
            "amen" | "dmrgplusenrich" => Ok(Self::DmrgPlusEnrich),
            other => Err(QttError::Argument(format!("unknown inversion mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum InitialGuess {
    /// `I / s` with `s` a power-iteration estimate of the spectral norm.
    ScaledIdentity,
    Given(TTOperator),
}

#[derive(Clone, Debug)]
pub struct InverseConfig {
    pub target_eps: f64,
    pub max_sweeps: usize,
    pub local_solver: LocalSolver,
    pub local_dense_threshold: usize,
    /// Relative tolerance of iterative local solves; `None` means
    /// `target_eps / 10`.
    pub local_iter_tol: Option<f64>,
    pub kick_rank: usize,
    pub max_rank: usize,
    pub init: InitialGuess,
    pub mode: InverseMode,
    /// Number of random sign probes in the per-sweep residual estimate.
    pub residual_probes: usize,
    /// A run counts as converged once the residual estimate is within this
    /// factor of `target_eps`.
    pub residual_factor: f64,
    pub seed: u64,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self {
            target_eps: 1e-6,
            max_sweeps: 30,
            local_solver: LocalSolver::Dense,
            local_dense_threshold: 2000,
            local_iter_tol: None,
            kick_rank: 4,
            max_rank: 1024,
            init: InitialGuess::ScaledIdentity,
            mode: InverseMode::Dmrg,
            residual_probes: 8,
            residual_factor: 5.0,
            seed: 0,
        }
    }
}

impl InverseConfig {
    pub fn with_eps(eps: f64) -> Self {
        Self { target_eps: eps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(QttError::Argument(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.target_eps, "target_eps")?;
        positive(self.residual_factor, "residual_factor")?;
        if let Some(t) = self.local_iter_tol {
            positive(t, "local_iter_tol")?;
        }
        if self.max_sweeps == 0 || self.kick_rank == 0 || self.max_rank == 0 || self.residual_probes == 0 {
            return Err(QttError::Argument(
                "max_sweeps, kick_rank, max_rank and residual_probes must be at least 1".into(),
            ));
        }
        if self.local_dense_threshold == 0 {
            return Err(QttError::Argument("local_dense_threshold must be at least 1".into()));
        }
        Ok(())
    }

    fn local_tol(&self) -> f64 {
        self.local_iter_tol.unwrap_or(self.target_eps / 10.0)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub sweep: usize,
    pub residual: f64,
    pub max_rank: usize,
    pub local_iterations: usize,
    pub wall_time_s: f64,
    /// False when the sweep made the residual worse and was rolled back.
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct InverseResult {
    pub inverse: TTOperator,
    pub reports: Vec<SweepReport>,
    pub converged: bool,
    /// Residual estimate of the returned inverse against the input operator.
    pub residual: f64,
}

/// `X = M Y`, kept as two factors so that applying it costs two TT matvecs.
#[derive(Clone, Debug)]
pub struct PreconditionedInverse {
    pub m: TTOperator,
    pub y: TTOperator,
    pub reports: Vec<SweepReport>,
    pub converged: bool,
    pub residual: f64,
}

impl PreconditionedInverse {
    /// The product `M Y` as a single rounded train.
    pub fn fused(&self, eps: f64) -> Result<TTOperator> {
        tt_matmat(&self.m, &self.y, eps)
    }

    pub fn apply_dense(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut ws = MatvecWorkspace::default();
        let mut t = Vec::new();
        tt_matvec_dense_into(&self.y, z, &mut t, &mut ws)?;
        let mut out = Vec::new();
        tt_matvec_dense_into(&self.m, &t, &mut out, &mut MatvecWorkspace::default())?;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Dense helpers on row-major buffers.

/// Row-major axis permutation: output axis `k` is input axis `perm[k]`.
fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    permute_into(src, shape, perm, &mut out);
    out
}

fn permute_into(src: &[f64], shape: &[usize], perm: &[usize], out: &mut Vec<f64>) {
    let n = shape.len();
    debug_assert_eq!(src.len(), shape.iter().product::<usize>());
    out.clear();
    if src.is_empty() {
        return;
    }
    let mut in_strides = vec![1usize; n];
    for k in (0..n - 1).rev() {
        in_strides[k] = in_strides[k + 1] * shape[k + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = n - 1;
    let (inner, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; n];
    let mut offset = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[offset..offset + inner]);
        } else {
            out.extend((0..inner).map(|t| src[offset + t * inner_stride]));
        }
        // Advance the outer odometer.
        let mut k = last;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            offset += strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            offset -= strides[k] * idx[k];
            idx[k] = 0;
        }
    }
}

fn view(data: &[f64], rows: usize, cols: usize, trans: bool) -> MatRef<'_, f64> {
    if trans {
        MatRef::from_row_major_slice(data, cols, rows).transpose()
    } else {
        MatRef::from_row_major_slice(data, rows, cols)
    }
}

/// `op(a) * op(b)` for row-major buffers, where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. A transposed operand is stored as its transpose.
fn mm(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    mm_into(a, ta, b, tb, m, k, n, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn mm_into(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, n: usize, out: &mut [f64]) {
    if m * n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    matmul(
        MatMut::from_row_major_slice_mut(out, m, n),
        Accum::Replace,
        view(a, m, k, ta),
        view(b, k, n, tb),
        1.0,
        faer::get_global_parallelism(),
    );
}

fn resized(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    buf.resize(len, 0.0);
    &mut buf[..len]
}

fn to_row_major(m: MatRef<'_, f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Interface stacks.

/// Partial contraction `(test rank, operator rank, trial rank)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub test: usize,
    pub op: usize,
    pub trial: usize,
    pub data: Vec<f64>,
}

impl Stack {
    fn unit() -> Self {
        Self { test: 1, op: 1, trial: 1, data: vec![1.0] }
    }

    pub fn get(&self, t: usize, a: usize, s: usize) -> f64 {
        self.data[(t * self.op + a) * self.trial + s]
    }
}

/// Left stacks `psi[b]` contract cores `0..b`; right stacks `phi[b]`
/// contract cores `b..d`. Both boundary stacks are the scalar 1.
#[derive(Clone, Debug)]
pub struct InterfaceStacks {
    pub psi: Vec<Stack>,
    pub phi: Vec<Stack>,
}

/// Operator core viewed as `(a0, j, i, a1)` with the pair `i + m j`, which is
/// exactly the stored row-major layout.
#[derive(Clone, Copy)]
struct OpCore<'a> {
    a0: usize,
    m: usize,
    a1: usize,
    data: &'a [f64],
}

impl<'a> OpCore<'a> {
    fn of(core: &'a Core) -> Result<Self> {
        let m = (core.mode() as f64).sqrt().round() as usize;
        if m * m != core.mode() {
            return Err(QttError::Shape(format!("operator core mode {} is not a square pair", core.mode())));
        }
        Ok(Self { a0: core.left_rank(), m, a1: core.right_rank(), data: core.data() })
    }
}

/// Shape of an unknown core `(s0, p, j, s1)` stored as `(s0, j + m p, s1)`.
#[derive(Clone, Copy, Debug)]
struct CoreShape {
    r0: usize,
    m: usize,
    r1: usize,
}

impl CoreShape {
    fn of(core: &Core, m: usize) -> Self {
        Self { r0: core.left_rank(), m, r1: core.right_rank() }
    }

    fn len(&self) -> usize {
        self.r0 * self.m * self.m * self.r1
    }
}

/// Scratch buffers reused across local operator applications.
#[derive(Default)]
struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// `T(t0, p, i, a1, s1) = sum psi(t0,a0,s0) A(a0,j,i,a1) W(s0,p,j,s1)`,
/// left in `scratch.b`.
fn half_left(psi: &Stack, a: OpCore<'_>, w: &[f64], ws: CoreShape, scratch: &mut Scratch) {
    let (t0, a0, s0) = (psi.test, psi.op, psi.trial);
    let (m, s1) = (ws.m, ws.r1);
    let rows = t0 * a0;
    mm_into(&psi.data, false, w, false, rows, s0, m * m * s1, resized(&mut scratch.a, rows * m * m * s1));
    permute_into(&scratch.a, &[t0, a0, m, m, s1], &[0, 2, 4, 1, 3], &mut scratch.b);
    let (r, n) = (t0 * m * s1, m * a.a1);
    mm_into(&scratch.b, false, a.data, false, r, a0 * m, n, resized(&mut scratch.a, r * n));
    permute_into(&scratch.a, &[t0, m, s1, m, a.a1], &[0, 1, 3, 4, 2], &mut scratch.b);
}

/// Applies the local operator `psi (x) A (x) phi` to a core, block diagonal in
/// the column digit. The result has shape `(psi.test, m*m, phi.test)`.
fn local_apply_into(
    psi: &Stack,
    a: OpCore<'_>,
    phi: &Stack,
    w: &[f64],
    ws: CoreShape,
    scratch: &mut Scratch,
    y: &mut [f64],
) {
    half_left(psi, a, w, ws, scratch);
    mm_into(&scratch.b, false, &phi.data, true, psi.test * ws.m * ws.m, phi.op * phi.trial, phi.test, y);
}

fn local_apply(psi: &Stack, a: OpCore<'_>, phi: &Stack, w: &[f64], ws: CoreShape) -> Vec<f64> {
    let mut y = vec![0.0; psi.test * ws.m * ws.m * phi.test];
    local_apply_into(psi, a, phi, w, ws, &mut Scratch::default(), &mut y);
    y
}

fn stack_left(psi: &Stack, a: OpCore<'_>, test: &Core, trial: &Core) -> Stack {
    let m = a.m;
    let ws = CoreShape::of(trial, m);
    let mut scratch = Scratch::default();
    half_left(psi, a, trial.data(), ws, &mut scratch);
    let rows = psi.test * m * m;
    let data = mm(test.data(), true, &scratch.b, false, test.right_rank(), rows, a.a1 * ws.r1);
    Stack { test: test.right_rank(), op: a.a1, trial: ws.r1, data }
}

fn stack_right(phi: &Stack, a: OpCore<'_>, test: &Core, trial: &Core) -> Stack {
    let m = a.m;
    let (t1, a1, s1) = (phi.test, phi.op, phi.trial);
    let (s0, t0, a0) = (trial.left_rank(), test.left_rank(), a.a0);
    let x = mm(trial.data(), false, &phi.data, true, s0 * m * m, s1, t1 * a1);
    let x = permute(&x, &[s0, m, m, t1, a1], &[0, 1, 3, 2, 4]);
    let ap = permute(a.data, &[a0, m, m, a1], &[1, 3, 0, 2]);
    let x = mm(&x, false, &ap, false, s0 * m * t1, m * a1, a0 * m);
    let x = permute(&x, &[s0, m, t1, a0, m], &[3, 0, 1, 4, 2]);
    let r = mm(&x, false, test.data(), true, a0 * s0, m * m * t1, t0);
    let data = permute(&r, &[a0, s0, t0], &[2, 0, 1]);
    Stack { test: t0, op: a0, trial: s0, data }
}

/// Vector-vector partial contraction `(test rank, trial rank)`.
#[derive(Clone, Debug)]
struct VStack {
    test: usize,
    trial: usize,
    data: Vec<f64>,
}

impl VStack {
    fn unit() -> Self {
        Self { test: 1, trial: 1, data: vec![1.0] }
    }
}

fn vstack_left(psi: &VStack, test: &Core, trial: &Core) -> VStack {
    let q = trial.mode();
    let t = mm(&psi.data, false, trial.data(), false, psi.test, psi.trial, q * trial.right_rank());
    let data = mm(test.data(), true, &t, false, test.right_rank(), psi.test * q, trial.right_rank());
    VStack { test: test.right_rank(), trial: trial.right_rank(), data }
}

fn vstack_right(phi: &VStack, test: &Core, trial: &Core) -> VStack {
    let q = trial.mode();
    let t = mm(trial.data(), false, &phi.data, true, trial.left_rank() * q, phi.trial, phi.test);
    let data = mm(test.data(), false, &t, true, test.left_rank(), q * phi.test, trial.left_rank());
    VStack { test: test.left_rank(), trial: trial.left_rank(), data }
}

/// Projection of a train onto the frame given by two vector stacks.
fn local_rhs(psi: &VStack, core: &Core, phi: &VStack) -> Vec<f64> {
    let q = core.mode();
    let t = mm(&psi.data, false, core.data(), false, psi.test, psi.trial, q * core.right_rank());
    mm(&t, false, &phi.data, true, psi.test * q, phi.trial, phi.test)
}

/// Builds all left and right interface stacks of `(I (x) A)` against `X`.
pub fn build_interface_stacks(a: &TTOperator, x: &TTOperator) -> Result<InterfaceStacks> {
    check_compatible(a, x.train())?;
    let d = a.depth();
    let mut psi = vec![Stack::unit()];
    for k in 0..d {
        let op = OpCore::of(a.train().core(k))?;
        let w = x.train().core(k);
        let next = stack_left(&psi[k], op, w, w);
        psi.push(next);
    }
    let mut phi = vec![Stack::unit(); d + 1];
    for k in (0..d).rev() {
        let op = OpCore::of(a.train().core(k))?;
        let w = x.train().core(k);
        phi[k] = stack_right(&phi[k + 1], op, w, w);
    }
    Ok(InterfaceStacks { psi, phi })
}

/// Dense matrix of the reduced system for core `k`, rows and columns in the
/// core's `(g, j + m p, g')` layout.
pub fn local_matrix(stacks: &InterfaceStacks, a: &TTOperator, k: usize) -> Result<Mat<f64>> {
    if k >= a.depth() {
        return Err(QttError::Range { index: k, extent: a.depth() });
    }
    let op = OpCore::of(a.train().core(k))?;
    let (psi, phi) = (&stacks.psi[k], &stacks.phi[k + 1]);
    let block = block_matrix(psi, op, phi);
    let m = op.m;
    let (t0, t1, s0, s1) = (psi.test, phi.test, psi.trial, phi.trial);
    let nb = s0 * m * s1;
    Ok(Mat::from_fn(t0 * m * m * t1, s0 * m * m * s1, |row, col| {
        let (g, rest) = (row / (m * m * t1), row % (m * m * t1));
        let (p, i, g1) = (rest / (m * t1), (rest / t1) % m, rest % t1);
        let (h, rest) = (col / (m * m * s1), col % (m * m * s1));
        let (q, j, h1) = (rest / (m * s1), (rest / s1) % m, rest % s1);
        if p != q {
            0.0
        } else {
            block[((g * m + i) * t1 + g1) * nb + (h * m + j) * s1 + h1]
        }
    }))
}

/// One diagonal block `(t0, i, t1) x (s0, j, s1)` of the local operator.
fn block_matrix(psi: &Stack, a: OpCore<'_>, phi: &Stack) -> Vec<f64> {
    let (t0, a0, s0) = (psi.test, psi.op, psi.trial);
    let (t1, a1, s1) = (phi.test, phi.op, phi.trial);
    let m = a.m;
    let p1 = permute(&psi.data, &[t0, a0, s0], &[0, 2, 1]);
    let c1 = mm(&p1, false, a.data, false, t0 * s0, a0, m * m * a1);
    let p2 = permute(&phi.data, &[t1, a1, s1], &[1, 0, 2]);
    let c2 = mm(&c1, false, &p2, false, t0 * s0 * m * m, a1, t1 * s1);
    permute(&c2, &[t0, s0, m, m, t1, s1], &[0, 3, 4, 1, 2, 5])
}

fn check_compatible(a: &TTOperator, x: &TensorTrain) -> Result<()> {
    if !a.scheme().is_square() {
        return Err(QttError::Shape("inversion needs equal row and column modes at every level".into()));
    }
    let expect: Vec<usize> = a.row_modes().iter().map(|m| m * m).collect();
    if x.modes() != expect {
        return Err(QttError::Shape(format!("unknown has modes {:?}, expected {:?}", x.modes(), expect)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Local solves.

#[derive(Debug)]
struct LocalSolution {
    core: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Solves the reduced system `(psi (x) A (x) phi) w = rhs` for one core.
fn solve_local(
    psi: &Stack,
    a: OpCore<'_>,
    phi: &Stack,
    rhs: &[f64],
    guess: &[f64],
    ws: CoreShape,
    cfg: &InverseConfig,
) -> Result<LocalSolution> {
    let n = ws.len();
    let m = ws.m;
    if cfg.local_solver == LocalSolver::Dense && n <= cfg.local_dense_threshold {
        let nb = ws.r0 * m * ws.r1;
        let block = block_matrix(psi, a, phi);
        let lu = LuFactors::new(MatRef::from_row_major_slice(&block, nb, nb))?;
        // Columns of the right-hand side are the column digits p.
        let b = permute(rhs, &[ws.r0, m, m, ws.r1], &[0, 2, 3, 1]);
        let x = lu.solve(MatRef::from_row_major_slice(&b, nb, m))?;
        let x = to_row_major(x.as_ref());
        let core = permute(&x, &[ws.r0, m, ws.r1, m], &[0, 3, 1, 2]);
        return Ok(LocalSolution { core, iterations: 0, converged: true });
    }
    let gcfg = GmresConfig { tol: cfg.local_tol(), max_iters: LOCAL_MAX_ITERS, restart: None, record_history: false };
    let mut scratch = Scratch::default();
    let mut apply = |x: &[f64], y: &mut [f64]| local_apply_into(psi, a, phi, x, ws, &mut scratch, y);
    let res = gmres_from(&mut apply, rhs, Some(guess), &gcfg, None)?;
    if !res.converged {
        log::debug!("local GMRES stopped at residual {:.3e} after {} iterations", res.residual, res.iterations);
    }
    Ok(LocalSolution { core: res.solution, iterations: res.iterations, converged: res.converged })
}

// ---------------------------------------------------------------------------
// Sweeps.

/// State of one alternating solve of `(I (x) A) vec(X) = vec(B)`.
struct Sweeper<'a> {
    op: &'a TTOperator,
    b: TensorTrain,
    cfg: &'a InverseConfig,
    x: Vec<Core>,
    z: Vec<Core>,
    xax_l: Vec<Stack>,
    xax_r: Vec<Stack>,
    xb_l: Vec<VStack>,
    xb_r: Vec<VStack>,
    zax_l: Vec<Stack>,
    zax_r: Vec<Stack>,
    zb_l: Vec<VStack>,
    zb_r: Vec<VStack>,
    kick: usize,
    iterations: usize,
    local_failures: usize,
}

impl<'a> Sweeper<'a> {
    fn new(op: &'a TTOperator, x0: TensorTrain, cfg: &'a InverseConfig) -> Result<Self> {
        check_compatible(op, &x0)?;
        let b = tt_identity(op.scheme())?.into_train();
        let d = op.depth();
        let mut s = Self {
            op,
            b,
            cfg,
            x: x0.into_cores(),
            z: Vec::new(),
            xax_l: vec![Stack::unit(); d + 1],
            xax_r: vec![Stack::unit(); d + 1],
            xb_l: vec![VStack::unit(); d + 1],
            xb_r: vec![VStack::unit(); d + 1],
            zax_l: vec![Stack::unit(); d + 1],
            zax_r: vec![Stack::unit(); d + 1],
            zb_l: vec![VStack::unit(); d + 1],
            zb_r: vec![VStack::unit(); d + 1],
            kick: cfg.kick_rank,
            iterations: 0,
            local_failures: 0,
        };
        if s.enriching() {
            s.reset_residual_frame()?;
        }
        s.rebuild()?;
        Ok(s)
    }

    fn enriching(&self) -> bool {
        self.cfg.mode == InverseMode::DmrgPlusEnrich
    }

    fn depth(&self) -> usize {
        self.x.len()
    }

    fn op_core(&self, k: usize) -> OpCore<'a> {
        OpCore::of(self.op.train().core(k)).expect("operator checked at construction")
    }

    fn m(&self, k: usize) -> usize {
        self.op.row_modes()[k]
    }

    fn train(&self) -> Result<TensorTrain> {
        TensorTrain::new(self.x.clone())
    }

    /// Random right-orthogonal residual frame of rank `2 * kick`.
    fn reset_residual_frame(&mut self) -> Result<()> {
        let d = self.depth();
        let modes: Vec<usize> = self.x.iter().map(Core::mode).collect();
        let cap = 2 * self.kick;
        let mut ranks = vec![1usize; d + 1];
        let mut left = 1usize;
        for k in 1..d {
            left = left.saturating_mul(modes[k - 1]);
            let right: usize = modes[k..].iter().fold(1usize, |acc, &m| acc.saturating_mul(m));
            ranks[k] = cap.min(left).min(right);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5a17);
        let mut z = TensorTrain::random(&modes, &ranks, &mut rng)?;
        orthogonalize_right(&mut z, 0)?;
        self.z = z.into_cores();
        Ok(())
    }

    /// Adds a tiny random component of rank `kick` to `X`. Two-site sweeps can
    /// settle at a rank where the interface bases hold no trace of the
    /// missing directions; the perturbation supplies them.
    fn random_kick(&mut self, salt: u64) -> Result<()> {
        let d = self.depth();
        let modes: Vec<usize> = self.x.iter().map(Core::mode).collect();
        let mut ranks = vec![1usize; d + 1];
        for r in ranks.iter_mut().take(d).skip(1) {
            *r = self.kick;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xd1ce ^ salt);
        let mut z = TensorTrain::random(&modes, &ranks, &mut rng)?;
        let x = self.train()?;
        let scale = 1e-2 * self.cfg.target_eps * x.frobenius_norm() / z.frobenius_norm().max(f64::MIN_POSITIVE);
        z.scale(scale);
        self.x = tt_add(&x, &z)?.into_cores();
        self.rebuild()
    }

    /// Right-orthogonalizes `X` onto core 0 and recomputes every right stack.
    fn rebuild(&mut self) -> Result<()> {
        let d = self.depth();
        let mut t = self.train()?;
        orthogonalize_right(&mut t, 0)?;
        self.x = t.into_cores();
        for k in (0..d).rev() {
            self.update_right(k);
        }
        Ok(())
    }

    fn update_left(&mut self, k: usize) {
        let a = self.op_core(k);
        self.xax_l[k + 1] = stack_left(&self.xax_l[k], a, &self.x[k], &self.x[k]);
        self.xb_l[k + 1] = vstack_left(&self.xb_l[k], &self.x[k], self.b.core(k));
        if self.enriching() {
            self.zax_l[k + 1] = stack_left(&self.zax_l[k], a, &self.z[k], &self.x[k]);
            self.zb_l[k + 1] = vstack_left(&self.zb_l[k], &self.z[k], self.b.core(k));
        }
    }

    fn update_right(&mut self, k: usize) {
        let a = self.op_core(k);
        self.xax_r[k] = stack_right(&self.xax_r[k + 1], a, &self.x[k], &self.x[k]);
        self.xb_r[k] = vstack_right(&self.xb_r[k + 1], &self.x[k], self.b.core(k));
        if self.enriching() {
            self.zax_r[k] = stack_right(&self.zax_r[k + 1], a, &self.z[k], &self.x[k]);
            self.zb_r[k] = vstack_right(&self.zb_r[k + 1], &self.z[k], self.b.core(k));
        }
    }

    /// A sweep truncates `2 (d - 1)` times, so each split gets an equal share
    /// of the error budget.
    fn local_tolerance(&self, norm: f64) -> f64 {
        let d = self.depth().max(2);
        self.cfg.target_eps * norm / ((2 * (d - 1)) as f64).sqrt()
    }

    fn solve_core(&mut self, k: usize) -> Result<Vec<f64>> {
        let a = self.op_core(k);
        let ws = CoreShape::of(&self.x[k], a.m);
        let rhs = local_rhs(&self.xb_l[k], self.b.core(k), &self.xb_r[k + 1]);
        let sol = solve_local(&self.xax_l[k], a, &self.xax_r[k + 1], &rhs, self.x[k].data(), ws, self.cfg)?;
        self.iterations += sol.iterations;
        if !sol.converged {
            self.local_failures += 1;
        }
        Ok(sol.core)
    }

    /// Local residual of `w` in the frame (left test, right test).
    fn residual_core(&self, k: usize, w: &[f64], left_z: bool, right_z: bool) -> Vec<f64> {
        let a = self.op_core(k);
        let ws = CoreShape::of(&self.x[k], a.m);
        let (psi, psib) = if left_z { (&self.zax_l[k], &self.zb_l[k]) } else { (&self.xax_l[k], &self.xb_l[k]) };
        let (phi, phib) =
            if right_z { (&self.zax_r[k + 1], &self.zb_r[k + 1]) } else { (&self.xax_r[k + 1], &self.xb_r[k + 1]) };
        let mut r = local_rhs(psib, self.b.core(k), phib);
        let ax = local_apply(psi, a, phi, w, ws);
        r.iter_mut().zip(&ax).for_each(|(ri, v)| *ri -= v);
        r
    }

    /// Columns of `extra` orthogonal to the orthonormal `basis`, at most
    /// `kick` of them, dropping directions that are numerically zero.
    fn enrichment(&self, basis: MatRef<'_, f64>, extra: Mat<f64>, scale: f64) -> Result<Option<Mat<f64>>> {
        let proj = basis.transpose() * extra.as_ref();
        let perp = &extra - basis * &proj;
        let f = truncated_svd(perp.as_ref(), 0.0, Some(self.kick))?;
        let keep = f.singular_values.iter().take_while(|&&s| s > 1e-12 * scale.max(f64::MIN_POSITIVE)).count();
        if keep == 0 {
            return Ok(None);
        }
        Ok(Some(f.left.subcols(0, keep).to_owned()))
    }

    fn forward_step(&mut self, k: usize) -> Result<()> {
        let d = self.depth();
        let m = self.m(k);
        let (r0, q, r1) = (self.x[k].left_rank(), m * m, self.x[k].right_rank());
        let w = self.solve_core(k)?;
        if k + 1 == d {
            self.x[k] = Core::new(r0, q, r1, w)?;
            return Ok(());
        }
        let wm = MatRef::from_row_major_slice(&w, r0 * q, r1);
        let (mut u, mut v) = if self.cfg.mode == InverseMode::Als {
            qr_orthonormalize(wm)?
        } else {
            let f = truncated_svd(wm, self.local_tolerance(norm(&w)), Some(self.cfg.max_rank))?;
            (f.left, f.right)
        };
        if self.enriching() {
            let wt = to_row_major((&u * &v).as_ref());
            let zc = self.residual_core(k, &wt, true, true);
            let (z0, z1) = (self.zax_l[k].test, self.zax_r[k + 1].test);
            let (zq, _) = qr_orthonormalize(MatRef::from_row_major_slice(&zc, z0 * q, z1))?;
            let enr = self.residual_core(k, &wt, false, true);
            let enr = MatRef::from_row_major_slice(&enr, r0 * q, self.zax_r[k + 1].test).to_owned();
            if let Some(e) = self.enrichment(u.as_ref(), enr, norm(&w))? {
                let mut ext = Mat::<f64>::zeros(u.nrows(), u.ncols() + e.ncols());
                ext.subcols_mut(0, u.ncols()).copy_from(&u);
                ext.subcols_mut(u.ncols(), e.ncols()).copy_from(&e);
                let (qn, rn) = qr_orthonormalize(ext.as_ref())?;
                let vn = rn.subcols(0, u.ncols()) * &v;
                u = qn;
                v = vn;
            }
            self.z[k] = Core::from_left_matrix(zq.as_ref(), z0, q)?;
        }
        self.x[k] = Core::from_left_matrix(u.as_ref(), r0, q)?;
        let next = &self.x[k + 1];
        let merged = &v * next.as_right_matrix();
        self.x[k + 1] = Core::from_right_matrix(merged.as_ref(), next.mode(), next.right_rank())?;
        self.update_left(k);
        Ok(())
    }

    fn backward_step(&mut self, k: usize) -> Result<()> {
        let m = self.m(k);
        let (r0, q, r1) = (self.x[k].left_rank(), m * m, self.x[k].right_rank());
        let w = self.solve_core(k)?;
        // Work with the transposed right unfolding so columns are orthonormal.
        let wt_mat = MatRef::from_row_major_slice(&w, r0, q * r1).transpose().to_owned();
        let (mut vt, mut ut) = if self.cfg.mode == InverseMode::Als {
            qr_orthonormalize(wt_mat.as_ref())?
        } else {
            let f = truncated_svd(wt_mat.as_ref(), self.local_tolerance(norm(&w)), Some(self.cfg.max_rank))?;
            (f.left, f.right)
        };
        if self.enriching() {
            let wt = to_row_major((&vt * &ut).transpose());
            let zc = self.residual_core(k, &wt, true, true);
            let (z0, z1) = (self.zax_l[k].test, self.zax_r[k + 1].test);
            let zc_t = MatRef::from_row_major_slice(&zc, z0, q * z1).transpose().to_owned();
            let (zq, _) = qr_orthonormalize(zc_t.as_ref())?;
            let enr = self.residual_core(k, &wt, true, false);
            let enr_t = MatRef::from_row_major_slice(&enr, self.zax_l[k].test, q * r1).transpose().to_owned();
            if let Some(e) = self.enrichment(vt.as_ref(), enr_t, norm(&w))? {
                let mut ext = Mat::<f64>::zeros(vt.nrows(), vt.ncols() + e.ncols());
                ext.subcols_mut(0, vt.ncols()).copy_from(&vt);
                ext.subcols_mut(vt.ncols(), e.ncols()).copy_from(&e);
                let (qn, rn) = qr_orthonormalize(ext.as_ref())?;
                let un = rn.subcols(0, vt.ncols()) * &ut;
                vt = qn;
                ut = un;
            }
            self.z[k] = Core::from_right_matrix(zq.transpose(), q, z1)?;
        }
        // w = ut^T vt^T: core k takes vt^T, core k-1 absorbs ut^T.
        self.x[k] = Core::from_right_matrix(vt.transpose(), q, r1)?;
        let prev = &self.x[k - 1];
        let merged = prev.as_left_matrix() * ut.transpose();
        self.x[k - 1] = Core::from_left_matrix(merged.as_ref(), prev.left_rank(), prev.mode())?;
        self.update_right(k);
        Ok(())
    }

    /// Joint solve of cores `k, k+1`; `forward` decides which side keeps the
    /// singular values.
    fn pair_step(&mut self, k: usize, forward: bool) -> Result<()> {
        let (ma, mb) = (self.m(k), self.m(k + 1));
        let (ca, cb) = (self.op_core(k), self.op_core(k + 1));
        let (r0, r2) = (self.x[k].left_rank(), self.x[k + 1].right_rank());
        let mm_ = ma * mb;
        // Merged operator core (a0, J, I, a2) with J = j1 + ma j2.
        let prod = mm(ca.data, false, cb.data, false, ca.a0 * ma * ma, ca.a1, mb * mb * cb.a1);
        let merged_op = permute(&prod, &[ca.a0, ma, ma, mb, mb, cb.a1], &[0, 3, 1, 4, 2, 5]);
        let op = OpCore { a0: ca.a0, m: mm_, a1: cb.a1, data: &merged_op };
        let merge = |left: &Core, right: &Core| {
            let p = mm(left.data(), false, right.data(), false, left.left_rank() * ma * ma, left.right_rank(), mb * mb * right.right_rank());
            permute(&p, &[left.left_rank(), ma, ma, mb, mb, right.right_rank()], &[0, 3, 1, 4, 2, 5])
        };
        let guess = merge(&self.x[k], &self.x[k + 1]);
        let bmerged = merge(self.b.core(k), self.b.core(k + 1));
        let bcore = Core::new(self.b.core(k).left_rank(), mm_ * mm_, self.b.core(k + 1).right_rank(), bmerged)?;
        let rhs = local_rhs(&self.xb_l[k], &bcore, &self.xb_r[k + 2]);
        let ws = CoreShape { r0, m: mm_, r1: r2 };
        let sol = solve_local(&self.xax_l[k], op, &self.xax_r[k + 2], &rhs, &guess, ws, self.cfg)?;
        self.iterations += sol.iterations;
        if !sol.converged {
            self.local_failures += 1;
        }
        let split = permute(&sol.core, &[r0, mb, ma, mb, ma, r2], &[0, 2, 4, 1, 3, 5]);
        let sm = MatRef::from_row_major_slice(&split, r0 * ma * ma, mb * mb * r2);
        let tol = self.local_tolerance(norm(&split));
        if forward {
            let f = truncated_svd(sm, tol, Some(self.cfg.max_rank))?;
            self.x[k] = Core::from_left_matrix(f.left.as_ref(), r0, ma * ma)?;
            self.x[k + 1] = Core::from_right_matrix(f.right.as_ref(), mb * mb, r2)?;
            self.update_left(k);
        } else {
            // Orthonormal rows go right, singular values stay left.
            let f = truncated_svd(sm.transpose(), tol, Some(self.cfg.max_rank))?;
            self.x[k] = Core::from_left_matrix(f.right.transpose(), r0, ma * ma)?;
            self.x[k + 1] = Core::from_right_matrix(f.left.transpose(), mb * mb, r2)?;
            self.update_right(k + 1);
        }
        Ok(())
    }

    fn sweep(&mut self) -> Result<()> {
        let d = self.depth();
        if d == 1 || self.cfg.mode != InverseMode::Dmrg {
            for k in 0..d {
                if k + 1 < d || d == 1 {
                    self.forward_step(k)?;
                }
            }
            for k in (1..d).rev() {
                self.backward_step(k)?;
            }
        } else {
            for k in 0..d - 1 {
                self.pair_step(k, true)?;
            }
            for k in (0..d - 1).rev() {
                self.pair_step(k, false)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Residual estimates.

fn sign_probes(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()).collect()
}

/// Mean of `|A X z - z| / |z|` over random sign vectors `z`.
fn probe_residual(
    n: usize,
    probes: usize,
    seed: u64,
    mut apply_ax: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let zs = sign_probes(n, probes, seed);
    let mut total = 0.0;
    for z in &zs {
        let y = apply_ax(z)?;
        let r: f64 = y.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        total += r / norm(z);
    }
    Ok(total / zs.len() as f64)
}

/// Hutchinson-style estimate of the relative residual of `X` as an inverse of
/// `A`, using `probes` random sign vectors. An order-of-magnitude indicator.
pub fn residual_estimate(a: &TTOperator, x: &TTOperator, probes: usize, seed: u64) -> Result<f64> {
    let (mut wa, mut wx) = (MatvecWorkspace::default(), MatvecWorkspace::default());
    probe_residual(a.cols(), probes.max(1), seed, |z| {
        let (mut t, mut y) = (Vec::new(), Vec::new());
        tt_matvec_dense_into(x, z, &mut t, &mut wx)?;
        tt_matvec_dense_into(a, &t, &mut y, &mut wa)?;
        Ok(y)
    })
}

/// [`residual_estimate`] for the factored inverse `M Y`.
pub fn residual_estimate_product(
    a: &TTOperator,
    m: &TTOperator,
    y: &TTOperator,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let (mut wa, mut wm, mut wy) = (MatvecWorkspace::default(), MatvecWorkspace::default(), MatvecWorkspace::default());
    probe_residual(a.cols(), probes.max(1), seed, |z| {
        let (mut t, mut u, mut out) = (Vec::new(), Vec::new(), Vec::new());
        tt_matvec_dense_into(y, z, &mut t, &mut wy)?;
        tt_matvec_dense_into(m, &t, &mut u, &mut wm)?;
        tt_matvec_dense_into(a, &u, &mut out, &mut wa)?;
        Ok(out)
    })
}

/// Mean of `|A (X e_j) - e_j|` over `samples` random coordinate vectors.
pub fn sampled_column_residual(a: &TTOperator, x: &TTOperator, samples: usize, seed: u64) -> Result<f64> {
    let n = a.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wa, mut wx) = (MatvecWorkspace::default(), MatvecWorkspace::default());
    let mut total = 0.0;
    let samples = samples.max(1);
    for _ in 0..samples {
        let j = rng.random_range(0..n);
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let (mut t, mut y) = (Vec::new(), Vec::new());
        tt_matvec_dense_into(x, &e, &mut t, &mut wx)?;
        tt_matvec_dense_into(a, &t, &mut y, &mut wa)?;
        y[j] -= 1.0;
        total += norm(&y);
    }
    Ok(total / samples as f64)
}

/// Power-iteration estimate of the spectral norm.
fn spectral_norm_estimate(a: &TTOperator, steps: usize, seed: u64) -> Result<f64> {
    let at = crate::arith::tt_transpose(a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..a.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mut wa, mut wt) = (MatvecWorkspace::default(), MatvecWorkspace::default());
    let mut sigma = 0.0;
    let (mut av, mut atav) = (Vec::new(), Vec::new());
    for _ in 0..steps {
        let nv = norm(&v);
        if nv == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= nv);
        tt_matvec_dense_into(a, &v, &mut av, &mut wa)?;
        sigma = norm(&av);
        tt_matvec_dense_into(&at, &av, &mut atav, &mut wt)?;
        std::mem::swap(&mut v, &mut atav);
    }
    Ok(sigma)
}

// ---------------------------------------------------------------------------
// Drivers.

fn initial_guess(op: &TTOperator, cfg: &InverseConfig) -> Result<TensorTrain> {
    match &cfg.init {
        InitialGuess::Given(x) => {
            check_compatible(op, x.train())?;
            Ok(x.train().clone())
        }
        InitialGuess::ScaledIdentity => {
            let sigma = spectral_norm_estimate(op, 10, cfg.seed)?;
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(QttError::Data("operator has zero or non-finite norm".into()));
            }
            let mut x = tt_identity(op.scheme())?.into_train();
            x.scale(1.0 / sigma);
            Ok(x)
        }
    }
}

struct SweepOutcome {
    x: TensorTrain,
    reports: Vec<SweepReport>,
    converged: bool,
}

/// Runs sweeps on `(I (x) op) vec(X) = vec(I)`; `residual` scores a candidate.
fn run_sweeps(
    op: &TTOperator,
    cfg: &InverseConfig,
    mut residual: impl FnMut(&TTOperator) -> Result<f64>,
) -> Result<SweepOutcome> {
    let x0 = initial_guess(op, cfg)?;
    let mut sw = Sweeper::new(op, x0, cfg)?;
    let threshold = cfg.residual_factor * cfg.target_eps;
    let mut reports = Vec::new();
    let mut best: Option<(f64, TensorTrain)> = None;
    let mut best_history: Vec<f64> = Vec::new();
    let mut prev = f64::INFINITY;

    for sweep in 1..=cfg.max_sweeps {
        let start = Instant::now();
        sw.iterations = 0;
        sw.sweep()?;
        let x = tt_round_capped(&sw.train()?, cfg.target_eps * 1e-2, Some(cfg.max_rank))?;
        let candidate = TTOperator::new(x.clone(), op.scheme().clone())?;
        let res = residual(&candidate)?;
        if !res.is_finite() {
            return Err(QttError::Data("residual estimate is not finite".into()));
        }
        let best_res = best.as_ref().map_or(f64::INFINITY, |(r, _)| *r);
        let accepted = res <= 1.1 * best_res || best.is_none();
        let report = SweepReport {
            sweep,
            residual: res,
            max_rank: x.max_rank(),
            local_iterations: sw.iterations,
            wall_time_s: start.elapsed().as_secs_f64(),
            accepted,
        };
        log::info!("{}", serde_json::to_string(&report)?);
        reports.push(report);
        if !accepted {
            // Roll back and enrich more cautiously.
            let (_, bx) = best.as_ref().expect("rejection implies a best iterate");
            sw.x = bx.clone().into_cores();
            sw.kick = (sw.kick / 2).max(1);
            if sw.enriching() {
                sw.reset_residual_frame()?;
            }
            sw.rebuild()?;
        } else if res < best_res {
            best = Some((res, x));
        }
        let best_res = best.as_ref().map_or(f64::INFINITY, |(r, _)| *r);
        best_history.push(best_res);
        if best_res < cfg.target_eps {
            break;
        }
        // At the truncation floor: within the accepted band and no longer
        // improving.
        if accepted && res <= threshold && res > 0.9 * prev {
            break;
        }
        if best_history.len() > 3 {
            let old = best_history[best_history.len() - 4];
            if best_res > 0.99 * old {
                log::info!("inversion stagnated at residual {best_res:.3e}");
                break;
            }
        }
        if accepted && cfg.mode == InverseMode::Dmrg && res > threshold && res > 0.5 * prev {
            log::debug!("sweep {sweep} stalled at {res:.3e}, kicking");
            sw.random_kick(sweep as u64)?;
        }
        if accepted {
            prev = res;
        }
    }
    let (res, x) = best.expect("at least one sweep ran");
    if sw.local_failures > 0 {
        log::debug!("{} local solves stopped before reaching their tolerance", sw.local_failures);
    }
    Ok(SweepOutcome { x, reports, converged: res <= threshold })
}

/// The operator used inside the local systems: exact products are rounded
/// well below the target accuracy, which keeps ranks in check without
/// affecting the attainable residual.
fn system_operator(a: &TTOperator, eps: f64) -> Result<TTOperator> {
    let rounded = tt_round(a.train(), eps / 10.0)?;
    TTOperator::new(rounded, a.scheme().clone())
}

/// Computes `X ~ A^-1` by alternating local solves of `A X = I`.
pub fn invert(a: &TTOperator, cfg: &InverseConfig) -> Result<InverseResult> {
    cfg.validate()?;
    check_compatible(a, &tt_identity(a.scheme())?.into_train())?;
    let op = system_operator(a, cfg.target_eps)?;
    let probes = cfg.residual_probes;
    let out = run_sweeps(&op, cfg, |x| residual_estimate(&op, x, probes, cfg.seed))?;
    let inverse = TTOperator::new(out.x, a.scheme().clone())?;
    let residual = residual_estimate(a, &inverse, probes, cfg.seed)?;
    let converged = out.converged && residual <= cfg.residual_factor * cfg.target_eps;
    Ok(InverseResult { inverse, reports: out.reports, converged, residual })
}

/// Solves the right-preconditioned equation `A M Y = I`, so that
/// `A^-1 ~ M Y`.
pub fn invert_preconditioned(a: &TTOperator, m: &TTOperator, cfg: &InverseConfig) -> Result<PreconditionedInverse> {
    cfg.validate()?;
    if a.scheme() != m.scheme() {
        return Err(QttError::Shape("operator and preconditioner use different schemes".into()));
    }
    let am = tt_matmat(a, m, cfg.target_eps / 10.0)?;
    let op = system_operator(&am, cfg.target_eps)?;
    let probes = cfg.residual_probes;
    let out = run_sweeps(&op, cfg, |y| residual_estimate(&op, y, probes, cfg.seed))?;
    let y = TTOperator::new(out.x, a.scheme().clone())?;
    let residual = residual_estimate_product(a, m, &y, probes, cfg.seed)?;
    let converged = out.converged && residual <= cfg.residual_factor * cfg.target_eps;
    Ok(PreconditionedInverse { m: m.clone(), y, reports: out.reports, converged, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::tt_diag;
    use crate::tensor::TensorizationScheme;

    fn random_operator(scheme: &TensorizationScheme, rank: usize, seed: u64) -> TTOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes: Vec<usize> = scheme.row_modes().iter().map(|m| m * m).collect();
        let d = modes.len();
        let ranks: Vec<usize> = (0..=d).map(|k| if k == 0 || k == d { 1 } else { rank }).collect();
        TTOperator::new(TensorTrain::random(&modes, &ranks, &mut rng).unwrap(), scheme.clone()).unwrap()
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let out = permute(&src, &shape, &[2, 0, 1]);
        for c in 0..4 {
            for a in 0..2 {
                for b in 0..3 {
                    assert_eq!(out[(c * 2 + a) * 3 + b], src[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }

    /// `P^T (I (x) A) P` from explicit dense frames.
    fn projected_dense(a: &TTOperator, x: &TTOperator, k: usize) -> Mat<f64> {
        let am = a.to_matrix().unwrap();
        let core = x.train().core(k);
        let nloc = core.data().len();
        let cols: Vec<Mat<f64>> = (0..nloc)
            .map(|e| {
                let mut t = x.train().clone();
                let c = &mut t.cores_mut()[k];
                c.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i == e { 1.0 } else { 0.0 });
                TTOperator::new(t, x.scheme().clone()).unwrap().to_matrix().unwrap()
            })
            .collect();
        let images: Vec<Mat<f64>> = cols.iter().map(|c| &am * c).collect();
        Mat::from_fn(nloc, nloc, |r, c| {
            let (u, v) = (&cols[r], &images[c]);
            let mut s = 0.0;
            for j in 0..u.ncols() {
                for i in 0..u.nrows() {
                    s += u[(i, j)] * v[(i, j)];
                }
            }
            s
        })
    }

    #[test]
    fn local_matrix_equals_dense_projection() {
        let scheme = TensorizationScheme::from_modes(vec![2, 2, 2]).unwrap();
        for seed in 0..4 {
            let a = random_operator(&scheme, 2, seed);
            let x = random_operator(&scheme, 2, 100 + seed);
            let stacks = build_interface_stacks(&a, &x).unwrap();
            for k in 0..3 {
                let got = local_matrix(&stacks, &a, k).unwrap();
                let want = projected_dense(&a, &x, k);
                let err = (&got - &want).norm_max();
                assert!(err < 1e-10, "seed {seed} core {k}: {err}");
            }
        }
    }

    #[test]
    fn rank_one_stacks_are_brute_force_contractions() {
        let scheme = TensorizationScheme::from_modes(vec![2, 2]).unwrap();
        let a = random_operator(&scheme, 1, 7);
        let x = random_operator(&scheme, 1, 8);
        let stacks = build_interface_stacks(&a, &x).unwrap();
        // psi[1] = sum_{i,j,p} W(i,p) A(i,j) W(j,p) over the first level.
        let (ac, wc) = (a.train().core(0), x.train().core(0));
        let mut want = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    want += wc.get(0, i + 2 * p, 0) * ac.get(0, i + 2 * j, 0) * wc.get(0, j + 2 * p, 0);
                }
            }
        }
        assert!((stacks.psi[1].get(0, 0, 0) - want).abs() < 1e-13);
        let (ac, wc) = (a.train().core(1), x.train().core(1));
        let mut want = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    want += wc.get(0, i + 2 * p, 0) * ac.get(0, i + 2 * j, 0) * wc.get(0, j + 2 * p, 0);
                }
            }
        }
        assert!((stacks.phi[1].get(0, 0, 0) - want).abs() < 1e-13);
    }

    #[test]
    fn identity_gives_identity_local_operator() {
        let scheme = TensorizationScheme::morton(1, 3).unwrap();
        let id = tt_identity(&scheme).unwrap();
        // Normalized cores make the frame orthonormal.
        let mut x = id.clone();
        x.train_mut().cores_mut().iter_mut().for_each(|c| c.scale(std::f64::consts::FRAC_1_SQRT_2));
        let stacks = build_interface_stacks(&id, &x).unwrap();
        for k in 0..id.depth() {
            let m = local_matrix(&stacks, &id, k).unwrap();
            let err = (&m - Mat::<f64>::identity(m.nrows(), m.ncols())).norm_max();
            assert!(err < 1e-14);
        }
    }

    fn diagonal(scheme: &TensorizationScheme, value: impl Fn(usize) -> f64) -> TTOperator {
        let n = scheme.rows();
        let vals: Vec<f64> = (0..n).map(value).collect();
        let cfg = crate::compress::CompressionConfig::with_eps(1e-14);
        let v = crate::compress::compress_vector(&vals, &scheme.row_modes(), &cfg).unwrap();
        tt_diag(&v).unwrap().with_scheme(scheme.clone()).unwrap()
    }

    #[test]
    fn twice_identity_inverts_in_one_sweep() {
        let scheme = TensorizationScheme::morton(3, 3).unwrap();
        let mut a = tt_identity(&scheme).unwrap();
        a.train_mut().scale(2.0);
        for mode in [InverseMode::Als, InverseMode::Dmrg, InverseMode::DmrgPlusEnrich] {
            let cfg = InverseConfig { mode, ..InverseConfig::with_eps(1e-10) };
            let out = invert(&a, &cfg).unwrap();
            assert!(out.converged, "{mode:?}");
            assert_eq!(out.reports.len(), 1);
            assert_eq!(out.inverse.max_rank(), 1);
            let xm = out.inverse.to_matrix().unwrap();
            let err = (&xm - Mat::<f64>::identity(512, 512) * 0.5).norm_l2();
            assert!(err < 1e-10, "{mode:?}: {err}");
        }
    }

    #[test]
    fn diagonal_operator_inverse() {
        let scheme = TensorizationScheme::morton(1, 4).unwrap();
        let a = diagonal(&scheme, |i| 1.0 + (i as f64 / 16.0));
        let cfg = InverseConfig::with_eps(1e-10);
        let out = invert(&a, &cfg).unwrap();
        assert!(out.converged);
        let xm = out.inverse.to_matrix().unwrap();
        for i in 0..16 {
            assert!((xm[(i, i)] - 1.0 / (1.0 + i as f64 / 16.0)).abs() < 1e-9);
        }
    }

    fn shifted_random(scheme: &TensorizationScheme, seed: u64) -> TTOperator {
        let mut k = random_operator(scheme, 2, seed);
        let s = 0.3 / k.frobenius_norm();
        k.train_mut().scale(s);
        let id = tt_identity(scheme).unwrap();
        let sum = crate::arith::tt_add(id.train(), k.train()).unwrap();
        TTOperator::new(sum, scheme.clone()).unwrap()
    }

    #[test]
    fn dense_and_iterative_local_paths_agree() {
        let scheme = TensorizationScheme::from_modes(vec![2, 2, 2]).unwrap();
        let a = shifted_random(&scheme, 11);
        let x = random_operator(&scheme, 2, 12);
        let stacks = build_interface_stacks(&a, &x).unwrap();
        let k = 1;
        let op = OpCore::of(a.train().core(k)).unwrap();
        let core = x.train().core(k);
        let ws = CoreShape::of(core, 2);
        let rhs: Vec<f64> = (0..ws.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let dense_cfg = InverseConfig { local_solver: LocalSolver::Dense, ..InverseConfig::default() };
        let iter_cfg = InverseConfig {
            local_solver: LocalSolver::Iterative,
            local_iter_tol: Some(1e-13),
            ..InverseConfig::default()
        };
        let guess = vec![0.0; ws.len()];
        let d = solve_local(&stacks.psi[k], op, &stacks.phi[k + 1], &rhs, &guess, ws, &dense_cfg).unwrap();
        let it = solve_local(&stacks.psi[k], op, &stacks.phi[k + 1], &rhs, &guess, ws, &iter_cfg).unwrap();
        let err = d.core.iter().zip(&it.core).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / norm(&d.core) < 1e-8, "{err}");
        // And the dense path satisfies the assembled system.
        let lm = local_matrix(&stacks, &a, k).unwrap();
        let y = &lm * MatRef::from_column_major_slice(&d.core, ws.len(), 1);
        let res: f64 = (0..ws.len()).map(|i| (y[(i, 0)] - rhs[i]).powi(2)).sum::<f64>().sqrt();
        assert!(res < 1e-10 * norm(&rhs));
    }

    #[test]
    fn residual_estimate_limits() {
        let scheme = TensorizationScheme::morton(1, 5).unwrap();
        let a = diagonal(&scheme, |i| 2.0 + i as f64);
        let inv = diagonal(&scheme, |i| 1.0 / (2.0 + i as f64));
        assert!(residual_estimate(&a, &inv, 8, 1).unwrap() <= 1e-12);
        let mut zero = inv.clone();
        zero.train_mut().scale(0.0);
        assert!((residual_estimate(&a, &zero, 8, 1).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_operator_inverse_matches_dense() {
        let scheme = TensorizationScheme::morton(2, 3).unwrap();
        let a = shifted_random(&scheme, 21);
        for mode in [InverseMode::Dmrg, InverseMode::DmrgPlusEnrich] {
            let cfg = InverseConfig { mode, ..InverseConfig::with_eps(1e-9) };
            let out = invert(&a, &cfg).unwrap();
            let am = a.to_matrix().unwrap();
            let xm = out.inverse.to_matrix().unwrap();
            let err = (&am * &xm - Mat::<f64>::identity(64, 64)).norm_l2() / 8.0;
            assert!(out.converged, "{mode:?} {:?}", out.reports);
            assert!(err < 1e-7, "{mode:?}: {err}");
        }
    }

    #[test]
    fn exact_preconditioner_needs_one_sweep() {
        let scheme = TensorizationScheme::morton(1, 5).unwrap();
        let a = diagonal(&scheme, |i| 1.0 + (i % 5) as f64);
        let m = diagonal(&scheme, |i| 1.0 / (1.0 + (i % 5) as f64));
        let out = invert_preconditioned(&a, &m, &InverseConfig::with_eps(1e-10)).unwrap();
        assert!(out.converged);
        assert_eq!(out.reports.len(), 1);
        let ym = out.y.to_matrix().unwrap();
        assert!((&ym - Mat::<f64>::identity(32, 32)).norm_max() < 1e-10);
    }

    #[test]
    fn identity_preconditioner_matches_plain_inverse() {
        let scheme = TensorizationScheme::morton(2, 2).unwrap();
        let a = shifted_random(&scheme, 31);
        let cfg = InverseConfig::with_eps(1e-8);
        let plain = invert(&a, &cfg).unwrap();
        let pre = invert_preconditioned(&a, &tt_identity(&scheme).unwrap(), &cfg).unwrap();
        assert_eq!(plain.reports.len(), pre.reports.len());
        let diff = (plain.inverse.to_matrix().unwrap() - pre.y.to_matrix().unwrap()).norm_max();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn estimate_tracks_dense_residual() {
        let scheme = TensorizationScheme::morton(2, 2).unwrap();
        let a = shifted_random(&scheme, 41);
        let cfg = InverseConfig { max_sweeps: 1, ..InverseConfig::with_eps(1e-2) };
        let x = invert(&a, &cfg).unwrap().inverse;
        let r = &a.to_matrix().unwrap() * &x.to_matrix().unwrap() - Mat::<f64>::identity(16, 16);
        let true_res = r.norm_l2() / 4.0;
        let est = residual_estimate(&a, &x, 8, 3).unwrap();
        assert!(est <= 3.0 * true_res && est >= true_res / 3.0, "{est} vs {true_res}");
    }

    #[test]
    fn rejects_rectangular_operator() {
        let scheme = TensorizationScheme::rectangular(vec![2, 2], vec![2, 4]).unwrap();
        let modes: Vec<usize> = (0..scheme.depth()).map(|k| scheme.row_modes()[k] * scheme.col_modes()[k]).collect();
        let t = TensorTrain::ones(&modes).unwrap();
        let a = TTOperator::new(t, scheme).unwrap();
        assert!(invert(&a, &InverseConfig::default()).is_err());
    }
}
