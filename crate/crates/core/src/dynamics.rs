//! State, control and belief types, and the model abstraction shared by the
//! propagator, the simulator, the rank tests and the solver.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relative symmetry tolerance for stored covariances.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// PSD tolerance factor: min eigenvalue must be >= -PSD_TOL * (1 + trace).
pub const PSD_TOL: f64 = 1e-8;

macro_rules! vector_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(pub DVector<f64>);

        impl $name {
            pub fn zeros(dim: usize) -> Self {
                Self(DVector::zeros(dim))
            }

            pub fn from_slice(values: &[f64]) -> Self {
                Self(DVector::from_column_slice(values))
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn into_inner(self) -> DVector<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = DVector<f64>;
            fn deref(&self) -> &DVector<f64> {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut DVector<f64> {
                &mut self.0
            }
        }

        impl From<DVector<f64>> for $name {
            fn from(v: DVector<f64>) -> Self {
                Self(v)
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(DVector::from_vec(v))
            }
        }

        impl<const N: usize> From<[f64; N]> for $name {
            fn from(v: [f64; N]) -> Self {
                Self(DVector::from_column_slice(&v))
            }
        }
    };
}

vector_newtype!(StateVector);
vector_newtype!(ControlVector);

/// Symmetrizes a square matrix in place: `P <- (P + P^T) / 2`.
pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = avg;
            p[(j, i)] = avg;
        }
    }
}

/// Largest negative eigenvalue, relative to `1 + trace`, that an integration
/// step may repair by clipping. Anything below is left for the PSD check.
pub const PSD_REPAIR: f64 = 1e-6;

/// Clips slightly negative eigenvalues of a symmetric `p` to zero. Returns
/// whether `p` changed.
pub fn repair_psd(p: &mut DMatrix<f64>) -> bool {
    if p.clone().cholesky().is_some() {
        return false;
    }
    let eig = p.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min < 0.0 && min >= -PSD_REPAIR * (1.0 + p.trace().abs())) {
        return false;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    *p = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(p);
    true
}

pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    if p.nrows() == 0 {
        return 0.0;
    }
    p.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric positive semi-definite matrix, stored full.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
    /// Symmetrizes and validates the PSD tolerance.
    pub fn new(mut p: DMatrix<f64>) -> Result<Self> {
        if p.nrows() != p.ncols() {
            return Err(Error::InvalidArgument(format!(
                "covariance must be square, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance".into()));
        }
        symmetrize(&mut p);
        let min_eig = min_eigenvalue(&p);
        if min_eig < -PSD_TOL * (1.0 + p.trace().abs()) {
            return Err(Error::NotPsd { time: f64::NAN, min_eig });
        }
        Ok(Self(p))
    }

    /// Symmetrizes without the eigenvalue check. Used on hot paths where the
    /// caller checks PSD-ness separately.
    pub fn new_unchecked(mut p: DMatrix<f64>) -> Self {
        symmetrize(&mut p);
        Self(p)
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.0)
    }

    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -PSD_TOL * (1.0 + self.0.trace().abs())
    }

    /// Projects tiny negative eigenvalues to zero. Only meant for emitted
    /// results, never inside an integration loop.
    pub fn psd_projected(&self) -> Self {
        let eig = self.0.clone().symmetric_eigen();
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        let mut p = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        symmetrize(&mut p);
        Self(p)
    }

    /// Square-root factor `L` with `L L^T = P` (Cholesky when positive
    /// definite, eigen-decomposition of the projected matrix otherwise).
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        if let Some(chol) = self.0.clone().cholesky() {
            return chol.l();
        }
        let eig = self.0.clone().symmetric_eigen();
        let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&roots)
    }

    /// Standard deviations (square roots of the diagonal).
    pub fn std_devs(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)].max(0.0).sqrt()).collect()
    }
}

impl Deref for CovarianceMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Mean/covariance pair, the state of the lifted deterministic system.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: StateVector,
    pub cov: CovarianceMatrix,
}

impl GaussianBelief {
    pub fn new(mean: StateVector, cov: CovarianceMatrix) -> Result<Self> {
        check_dim("belief covariance", mean.dim(), cov.dim())?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }
}

/// Itô control system `dx = f(x,u) dt + g(x,u) dW`.
///
/// Implementations write into caller-provided buffers so the integrators can
/// run without allocating. All methods must be pure.
pub trait DynamicsModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Number of Wiener channels `d`.
    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()>;

    /// State Jacobian `D_x f`. Defaults to central finite differences.
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        fd_jacobian_into(self, x, u, out)
    }

    /// Dispersion matrix `g(x,u)`, shape `n x d`.
    fn dispersion(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()>;

    /// Bound `phi(|u|) >= |D_x f(x,u)|_F` valid for every state, if known.
    fn jacobian_bound(&self, _control_norm: f64) -> Option<f64> {
        None
    }

    fn has_analytic_jacobian(&self) -> bool {
        false
    }
}

impl<M: DynamicsModel + ?Sized> DynamicsModel for Arc<M> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn noise_dim(&self) -> usize {
        (**self).noise_dim()
    }
    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        (**self).drift(x, u, out)
    }
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        (**self).jacobian(x, u, out)
    }
    fn dispersion(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        (**self).dispersion(x, u, out)
    }
    fn jacobian_bound(&self, control_norm: f64) -> Option<f64> {
        (**self).jacobian_bound(control_norm)
    }
    fn has_analytic_jacobian(&self) -> bool {
        (**self).has_analytic_jacobian()
    }
}

/// Finite-difference step used for coordinate `i`.
pub fn fd_step(xi: f64) -> f64 {
    1e-6 * (1.0 + xi.abs())
}

/// Central-difference Jacobian of the drift, written into `out`.
pub fn fd_jacobian_into<M: DynamicsModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    out: &mut DMatrix<f64>,
) -> Result<()> {
    let n = model.state_dim();
    let mut xp = x.clone();
    let mut fp = DVector::zeros(n);
    let mut fm = DVector::zeros(n);
    for j in 0..n {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        model.drift(&xp, u, &mut fp)?;
        xp[j] = x[j] - h;
        model.drift(&xp, u, &mut fm)?;
        xp[j] = x[j];
        for i in 0..n {
            let d = (fp[i] - fm[i]) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::NonFinite(format!("drift near x[{j}]")));
            }
            out[(i, j)] = d;
        }
    }
    Ok(())
}

/// Evaluates `f(x,u)` with dimension checks.
pub fn eval_drift<M: DynamicsModel + ?Sized>(model: &M, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
    check_dim("state", model.state_dim(), x.dim())?;
    check_dim("control", model.control_dim(), u.dim())?;
    let mut out = DVector::zeros(model.state_dim());
    model.drift(x, u, &mut out)?;
    Ok(StateVector(out))
}

/// Analytic (or model-default) Jacobian with dimension checks.
pub fn eval_jacobian<M: DynamicsModel + ?Sized>(model: &M, x: &StateVector, u: &ControlVector) -> Result<DMatrix<f64>> {
    check_dim("state", model.state_dim(), x.dim())?;
    check_dim("control", model.control_dim(), u.dim())?;
    let n = model.state_dim();
    let mut out = DMatrix::zeros(n, n);
    model.jacobian(x, u, &mut out)?;
    Ok(out)
}

/// Finite-difference Jacobian with per-coordinate step `1e-6 (1 + |x_i|)`.
pub fn eval_jacobian_fd<M: DynamicsModel + ?Sized>(model: &M, x: &StateVector, u: &ControlVector) -> Result<DMatrix<f64>> {
    check_dim("state", model.state_dim(), x.dim())?;
    check_dim("control", model.control_dim(), u.dim())?;
    let n = model.state_dim();
    let mut out = DMatrix::zeros(n, n);
    fd_jacobian_into(model, x, u, &mut out)?;
    Ok(out)
}

pub fn eval_dispersion<M: DynamicsModel + ?Sized>(model: &M, x: &StateVector, u: &ControlVector) -> Result<DMatrix<f64>> {
    check_dim("state", model.state_dim(), x.dim())?;
    check_dim("control", model.control_dim(), u.dim())?;
    let mut out = DMatrix::zeros(model.state_dim(), model.noise_dim());
    model.dispersion(x, u, &mut out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generic models

/// `dx = (A x + B u) dt + G dW`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::InvalidArgument("A must be square".into()));
        }
        check_dim("B rows", n, b.nrows())?;
        check_dim("G rows", n, g.nrows())?;
        Ok(Self { a, b, g })
    }

    /// Scalar Ornstein-Uhlenbeck process `dx = -a x dt + sigma dW` (one
    /// inert control channel).
    pub fn ornstein_uhlenbeck(a: f64, sigma: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, -a),
            b: DMatrix::zeros(1, 1),
            g: DMatrix::from_element(1, 1, sigma),
        }
    }

    /// Planar double integrator: state `(p_x, p_y, v_x, v_y)`, control is the
    /// acceleration, noise enters on the velocities.
    pub fn double_integrator_2d(sigma: f64) -> Self {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        let mut g = DMatrix::zeros(4, 2);
        g[(2, 0)] = sigma;
        g[(3, 1)] = sigma;
        Self { a, b, g }
    }
}

impl DynamicsModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn noise_dim(&self) -> usize {
        self.g.ncols()
    }
    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        out.gemv(1.0, &self.a, x, 0.0);
        out.gemv(1.0, &self.b, u, 1.0);
        Ok(())
    }
    fn jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        out.copy_from(&self.a);
        Ok(())
    }
    fn dispersion(&self, _x: &DVector<f64>, _u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        out.copy_from(&self.g);
        Ok(())
    }
    fn jacobian_bound(&self, _control_norm: f64) -> Option<f64> {
        Some(self.a.norm())
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

type FieldFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type FieldJacFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Control-linear system `f(x,u) = sum_i u_i f_i(x)` with constant dispersion.
#[derive(Clone)]
pub struct ControlLinearModel {
    n: usize,
    fields: Vec<FieldFn>,
    jacobians: Vec<FieldJacFn>,
    /// Uniform bound `L >= |D f_i|_F`.
    pub lipschitz: f64,
    pub g: DMatrix<f64>,
}

impl ControlLinearModel {
    pub fn new(n: usize, fields: Vec<FieldFn>, jacobians: Vec<FieldJacFn>, lipschitz: f64, g: DMatrix<f64>) -> Result<Self> {
        if fields.len() != jacobians.len() {
            return Err(Error::InvalidArgument("one Jacobian per field required".into()));
        }
        check_dim("dispersion rows", n, g.nrows())?;
        Ok(Self {
            n,
            fields,
            jacobians,
            lipschitz,
            g,
        })
    }

    /// Brockett nonholonomic integrator `f1 = (1, 0, -x2)`, `f2 = (0, 1, x1)`.
    pub fn brockett(g: DMatrix<f64>) -> Self {
        let f1: FieldFn = Arc::new(|x: &DVector<f64>| DVector::from_column_slice(&[1.0, 0.0, -x[1]]));
        let f2: FieldFn = Arc::new(|x: &DVector<f64>| DVector::from_column_slice(&[0.0, 1.0, x[0]]));
        let j1: FieldJacFn = Arc::new(|_x: &DVector<f64>| {
            let mut j = DMatrix::zeros(3, 3);
            j[(2, 1)] = -1.0;
            j
        });
        let j2: FieldJacFn = Arc::new(|_x: &DVector<f64>| {
            let mut j = DMatrix::zeros(3, 3);
            j[(2, 0)] = 1.0;
            j
        });
        Self {
            n: 3,
            fields: vec![f1, f2],
            jacobians: vec![j1, j2],
            lipschitz: 1.0,
            g,
        }
    }

    pub fn field(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        (self.fields[i])(x)
    }
}

impl DynamicsModel for ControlLinearModel {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.fields.len()
    }
    fn noise_dim(&self) -> usize {
        self.g.ncols()
    }
    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        out.fill(0.0);
        for (ui, f) in u.iter().zip(&self.fields) {
            if *ui != 0.0 {
                out.axpy(*ui, &f(x), 1.0);
            }
        }
        Ok(())
    }
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        out.fill(0.0);
        for (ui, j) in u.iter().zip(&self.jacobians) {
            if *ui != 0.0 {
                *out += j(x) * *ui;
            }
        }
        Ok(())
    }
    fn dispersion(&self, _x: &DVector<f64>, _u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        out.copy_from(&self.g);
        Ok(())
    }
    fn jacobian_bound(&self, control_norm: f64) -> Option<f64> {
        // |sum u_i Df_i| <= L |u|_1 <= L sqrt(k) |u|
        Some(self.lipschitz * (self.fields.len() as f64).sqrt() * control_norm)
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

type DriftFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Closure-backed model with constant dispersion. Handy for tests and
/// one-off experiments.
#[derive(Clone)]
pub struct FnModel {
    n: usize,
    k: usize,
    drift: DriftFn,
    jacobian: Option<JacFn>,
    g: DMatrix<f64>,
}

impl FnModel {
    pub fn new(
        n: usize,
        k: usize,
        drift: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            k,
            drift: Arc::new(drift),
            jacobian: None,
            g: DMatrix::zeros(n, 1),
        }
    }

    pub fn with_jacobian(mut self, jac: impl Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_dispersion(mut self, g: DMatrix<f64>) -> Self {
        self.g = g;
        self
    }

    /// `f(x,u) = c` everywhere.
    pub fn constant(c: DVector<f64>, k: usize) -> Self {
        let n = c.len();
        Self::new(n, k, move |_x, _u| c.clone()).with_jacobian(move |_x, _u| DMatrix::zeros(n, n))
    }
}

impl DynamicsModel for FnModel {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.k
    }
    fn noise_dim(&self) -> usize {
        self.g.ncols()
    }
    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        out.copy_from(&(self.drift)(x, u));
        Ok(())
    }
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        match &self.jacobian {
            Some(j) => {
                out.copy_from(&j(x, u));
                Ok(())
            }
            None => fd_jacobian_into(self, x, u, out),
        }
    }
    fn dispersion(&self, _x: &DVector<f64>, _u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        out.copy_from(&self.g);
        Ok(())
    }
    fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }
}

// ---------------------------------------------------------------------------
// Controls

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    PiecewiseConstant,
    PiecewiseLinear,
}

/// Time grid plus control samples. Piecewise-constant trajectories hold one
/// value per interval, piecewise-linear ones one value per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    nodes: Vec<f64>,
    values: Vec<ControlVector>,
    mode: Interpolation,
}

impl ControlTrajectory {
    pub fn new(nodes: Vec<f64>, values: Vec<ControlVector>, mode: Interpolation) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidArgument("control grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidArgument("control grid must start at t = 0".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("control nodes must be strictly increasing".into()));
        }
        let expected = match mode {
            Interpolation::PiecewiseConstant => nodes.len() - 1,
            Interpolation::PiecewiseLinear => nodes.len(),
        };
        check_dim("control samples", expected, values.len())?;
        let k = values[0].dim();
        if values.iter().any(|v| v.dim() != k) {
            return Err(Error::InvalidArgument("control samples differ in dimension".into()));
        }
        Ok(Self { nodes, values, mode })
    }

    /// Piecewise-constant trajectory on a uniform grid of `n_intervals`.
    pub fn uniform(horizon: f64, values: Vec<ControlVector>) -> Result<Self> {
        let n = values.len();
        if n == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidArgument("empty control or non-positive horizon".into()));
        }
        Self::new(uniform_grid(horizon, n), values, Interpolation::PiecewiseConstant)
    }

    pub fn constant(horizon: f64, n_intervals: usize, u: ControlVector) -> Result<Self> {
        Self::uniform(horizon, vec![u; n_intervals])
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &[ControlVector] {
        &self.values
    }

    pub fn mode(&self) -> Interpolation {
        self.mode
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn n_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn control_dim(&self) -> usize {
        self.values[0].dim()
    }

    /// Index of the interval containing `t` (right-continuous, the last
    /// interval is closed).
    pub fn interval_of(&self, t: f64) -> Result<usize> {
        let tf = self.horizon();
        let tol = 1e-12 * (1.0 + tf);
        if !(t >= -tol && t <= tf + tol) {
            return Err(Error::OutOfHorizon(t));
        }
        let idx = self.nodes.partition_point(|&node| node <= t);
        Ok(idx.saturating_sub(1).min(self.n_intervals() - 1))
    }

    pub fn eval(&self, t: f64) -> Result<ControlVector> {
        let i = self.interval_of(t)?;
        Ok(ControlVector(self.eval_in_interval(i, t)))
    }

    /// Value inside interval `i` at time `t`; the interval's own value is
    /// used at both of its endpoints.
    pub fn eval_in_interval(&self, i: usize, t: f64) -> DVector<f64> {
        match self.mode {
            Interpolation::PiecewiseConstant => self.values[i].0.clone(),
            Interpolation::PiecewiseLinear => {
                let (t0, t1) = (self.nodes[i], self.nodes[i + 1]);
                let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                &self.values[i].0 * (1.0 - w) + &self.values[i + 1].0 * w
            }
        }
    }

    pub(crate) fn eval_in_interval_into(&self, i: usize, t: f64, out: &mut DVector<f64>) {
        match self.mode {
            Interpolation::PiecewiseConstant => out.copy_from(&self.values[i].0),
            Interpolation::PiecewiseLinear => {
                let (t0, t1) = (self.nodes[i], self.nodes[i + 1]);
                let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                for j in 0..out.len() {
                    out[j] = self.values[i].0[j] * (1.0 - w) + self.values[i + 1].0[j] * w;
                }
            }
        }
    }
}

pub fn uniform_grid(horizon: f64, n_intervals: usize) -> Vec<f64> {
    let mut nodes: Vec<f64> = (0..=n_intervals).map(|i| horizon * i as f64 / n_intervals as f64).collect();
    nodes[n_intervals] = horizon;
    nodes
}

// ---------------------------------------------------------------------------
// Costs

/// `x^T Q x + b^T x + c` with `Q` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticForm {
    pub fn zero(n: usize) -> Self {
        Self {
            hessian: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
            constant: 0.0,
        }
    }

    pub fn linear(b: DVector<f64>) -> Self {
        let n = b.len();
        Self {
            hessian: DMatrix::zeros(n, n),
            linear: b,
            constant: 0.0,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }
}

type HessianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Terminal and running costs quadratic in the state, plus covariance
/// penalties. The expected cost of a Gaussian belief is
/// `psi(m(tf)) + tr(Q_f P(tf)) + int L(m,u) + tr(Q(u) P) dt`
/// with `Q_f = cov_terminal + Q_psi` and `Q(u) = cov_running + Q_L(u)`.
#[derive(Clone)]
pub struct QuadraticCost {
    pub terminal: QuadraticForm,
    pub running: QuadraticForm,
    /// Optional control-dependent override of `running.hessian`.
    pub running_hessian_fn: Option<HessianFn>,
    /// Diagonal control weights `R`: the running cost gains `sum_j R_j u_j^2`.
    pub control_weights: DVector<f64>,
    pub cov_terminal: DMatrix<f64>,
    pub cov_running: DMatrix<f64>,
}

impl std::fmt::Debug for QuadraticCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuadraticCost")
            .field("terminal", &self.terminal)
            .field("running", &self.running)
            .field("control_weights", &self.control_weights)
            .field("cov_terminal", &self.cov_terminal)
            .field("cov_running", &self.cov_running)
            .finish()
    }
}

impl QuadraticCost {
    pub fn zero(n: usize, k: usize) -> Self {
        Self {
            terminal: QuadraticForm::zero(n),
            running: QuadraticForm::zero(n),
            running_hessian_fn: None,
            control_weights: DVector::zeros(k),
            cov_terminal: DMatrix::zeros(n, n),
            cov_running: DMatrix::zeros(n, n),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.terminal.hessian.nrows()
    }

    /// Checks symmetry of every quadratic part and PSD-ness of the penalties.
    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        for (name, m) in [
            ("terminal hessian", &self.terminal.hessian),
            ("running hessian", &self.running.hessian),
            ("cov_terminal", &self.cov_terminal),
            ("cov_running", &self.cov_running),
        ] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::InvalidArgument(format!("{name} must be {n}x{n}")));
            }
            let asym = (m - m.transpose()).norm();
            if asym > SYMMETRY_TOL * (1.0 + m.norm()) {
                return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
            }
        }
        check_dim("terminal linear", n, self.terminal.linear.len())?;
        check_dim("running linear", n, self.running.linear.len())?;
        for (name, m) in [("cov_terminal", &self.cov_terminal), ("cov_running", &self.cov_running)] {
            if min_eigenvalue(m) < -PSD_TOL * (1.0 + m.trace().abs()) {
                return Err(Error::InvalidArgument(format!("{name} is not PSD")));
            }
        }
        Ok(())
    }

    /// `Q_f = Qbar_f + Q_psi`.
    pub fn terminal_cov_weight(&self) -> DMatrix<f64> {
        &self.cov_terminal + &self.terminal.hessian
    }

    /// `Q(u) = Qbar + Q_L(u)`.
    pub fn running_cov_weight(&self, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.running_hessian_fn {
            Some(h) => &self.cov_running + h(u),
            None => &self.cov_running + &self.running.hessian,
        }
    }

    /// `L(m, u)` including the control weights.
    pub fn running_value(&self, m: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let quad = match &self.running_hessian_fn {
            Some(h) => m.dot(&(h(u) * m)),
            None => m.dot(&(&self.running.hessian * m)),
        };
        quad + self.running.linear.dot(m) + self.running.constant + self.control_penalty(u)
    }

    pub fn control_penalty(&self, u: &DVector<f64>) -> f64 {
        self.control_weights.iter().zip(u.iter()).map(|(w, v)| w * v * v).sum()
    }

    pub fn has_control_dependent_hessian(&self) -> bool {
        self.running_hessian_fn.is_some()
    }
}

pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(A B) = sum_ij A_ij B_ji
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}
