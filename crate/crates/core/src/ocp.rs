//! Direct transcription of covariance-penalized optimal control problems
//! and an augmented-Lagrangian solver with a projected L-BFGS inner loop.
//!
//! Controls are piecewise constant on a uniform grid of `n_nodes`
//! intervals, beliefs come from single shooting through the lifted RK4
//! integrator, and a free final time enters through the time scaling
//! `t = tf * tau`. Gradients are forward finite differences; perturbing the
//! control of node `j` only re-propagates the suffix from node `j`.

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{min_eigenvalue, trace_product, PSD_TOL, ControlTrajectory, ControlVector, DynamicsModel, GaussianBelief, Interpolation, QuadraticCost};
use crate::error::{check_dim, Error, Result};
use crate::propagate::{all_finite, BeliefTrajectory, CostBreakdown, LiftedRk4};

// ---------------------------------------------------------------------------
// Normal quantiles

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Quantile of the standard normal distribution.
///
/// Rational approximation followed by Halley steps against `erfc`; the
/// absolute error is below `1e-9` on `(0, 1)`.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("probability {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996e0, 3.754408661907416e0];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5]) / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let mut x = if p < P_LOW {
        tail(p)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(1.0 - p)
    };
    // Work in the tail that keeps full relative precision.
    for _ in 0..3 {
        let e = if p > 0.5 {
            (1.0 - p) - normal_cdf(-x)
        } else {
            normal_cdf(x) - p
        };
        let u = e / normal_pdf(x);
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Problem statement

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Horizon {
    Fixed(f64),
    Free { min: f64, max: f64, guess: f64 },
}

/// Affine terminal set `{ x : A x = b }` on the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalTarget {
    pub selector: DMatrix<f64>,
    pub value: DVector<f64>,
}

impl TerminalTarget {
    /// `x_i = v_i` for the listed components.
    pub fn components(n: usize, indices: &[usize], values: &[f64]) -> Result<Self> {
        check_dim("target values", indices.len(), values.len())?;
        let mut a = DMatrix::zeros(indices.len(), n);
        for (r, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::InvalidArgument(format!("target index {i} out of range")));
            }
            a[(r, i)] = 1.0;
        }
        Ok(Self {
            selector: a,
            value: DVector::from_column_slice(values),
        })
    }

    fn validate(&self, n: usize) -> Result<()> {
        check_dim("target selector columns", n, self.selector.ncols())?;
        check_dim("target values", self.selector.nrows(), self.value.len())?;
        let sv = self.selector.clone().svd(false, false).singular_values;
        let max = sv.iter().cloned().fold(0.0, f64::max);
        if sv.len() < self.selector.nrows() || sv.iter().any(|s| *s <= 1e-10 * max) || max == 0.0 {
            return Err(Error::InvalidArgument("terminal target map must have full row rank".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    Upper,
    Lower,
}

/// Gaussian chance constraint on an affine function of the decision and the
/// state, `a = u[offset] + sum_j u[gain_j] x[state_j]`:
/// `Pr[a <= bound] >= p` (upper) or `Pr[a >= bound] >= p` (lower), imposed as
/// `E[a] + z_p sd(a) <= bound` resp. `bound - E[a] + z_p sd(a) <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChanceConstraintSpec {
    pub offset_index: usize,
    pub gain_indices: Vec<usize>,
    pub state_indices: Vec<usize>,
    pub bound: f64,
    pub side: BoundSide,
    pub p: f64,
    /// `sd = sqrt(k^T P k + smoothing^2)` keeps the row differentiable at
    /// zero gains.
    pub smoothing: f64,
    margin: f64,
}

impl ChanceConstraintSpec {
    pub fn new(offset_index: usize, gain_indices: Vec<usize>, state_indices: Vec<usize>, bound: f64, side: BoundSide, p: f64) -> Result<Self> {
        check_dim("chance constraint gains", state_indices.len(), gain_indices.len())?;
        if !(p > 0.5 && p < 1.0) {
            return Err(Error::InvalidArgument(format!("chance level {p} outside (0.5, 1)")));
        }
        Ok(Self {
            offset_index,
            gain_indices,
            state_indices,
            bound,
            side,
            p,
            smoothing: 1e-6,
            margin: inverse_normal_cdf(p)?,
        })
    }

    pub fn with_smoothing(mut self, smoothing: f64) -> Self {
        self.smoothing = smoothing;
        self
    }

    /// `Psi^{-1}(p)`.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Mean and standard deviation of the constrained quantity.
    pub fn moments(&self, u: &[f64], m: &[f64], p: &DMatrix<f64>) -> (f64, f64) {
        let mut mean = u[self.offset_index];
        let mut var = 0.0;
        for (a, (&gi, &si)) in self.gain_indices.iter().zip(&self.state_indices).enumerate() {
            mean += u[gi] * m[si];
            for (&gj, &sj) in self.gain_indices[..=a].iter().zip(&self.state_indices[..=a]) {
                let w = if gj == gi { 1.0 } else { 2.0 };
                var += w * u[gi] * u[gj] * p[(si, sj)];
            }
        }
        (mean, (var.max(0.0) + self.smoothing * self.smoothing).sqrt())
    }

    /// Constraint value, feasible when `<= 0`.
    pub fn value(&self, u: &[f64], m: &[f64], p: &DMatrix<f64>) -> f64 {
        let (mean, sd) = self.moments(u, m, p);
        match self.side {
            BoundSide::Upper => mean + self.margin * sd - self.bound,
            BoundSide::Lower => self.bound - mean + self.margin * sd,
        }
    }

    fn validate(&self, n: usize, k: usize) -> Result<()> {
        let bad_control = std::iter::once(&self.offset_index).chain(&self.gain_indices).any(|&i| i >= k);
        if bad_control || self.state_indices.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("chance constraint index out of range".into()));
        }
        Ok(())
    }
}

/// Robust planning problem on Gaussian beliefs.
#[derive(Clone)]
pub struct RobustOcp {
    pub model: Arc<dyn DynamicsModel>,
    pub cost: QuadraticCost,
    pub init: GaussianBelief,
    pub target: Option<TerminalTarget>,
    /// Per-component bounds on the decision control, physical units.
    pub control_box: Vec<(f64, f64)>,
    /// `u_min <= |u| <= u_max` on the decision control, as per-node rows.
    pub norm_bounds: Option<(f64, f64)>,
    pub chance_constraints: Vec<ChanceConstraintSpec>,
    pub horizon: Horizon,
    /// Control applied on every node by the default initial guess.
    pub initial_control: ControlVector,
    /// Typical magnitudes used to scale the terminal rows.
    pub state_scale: DVector<f64>,
    /// Physical control = `control_scale .* decision`.
    pub control_scale: DVector<f64>,
    /// Physical final time = `time_scale * decision`.
    pub time_scale: f64,
    pub steps_per_interval: usize,
}

impl std::fmt::Debug for RobustOcp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RobustOcp")
            .field("state_dim", &self.model.state_dim())
            .field("control_dim", &self.model.control_dim())
            .field("horizon", &self.horizon)
            .field("chance_constraints", &self.chance_constraints.len())
            .finish_non_exhaustive()
    }
}

impl RobustOcp {
    /// Unconstrained problem with unit scales and a zero initial control.
    pub fn new(model: Arc<dyn DynamicsModel>, cost: QuadraticCost, init: GaussianBelief, horizon: Horizon) -> Self {
        let (n, k) = (model.state_dim(), model.control_dim());
        Self {
            model,
            cost,
            init,
            target: None,
            control_box: vec![(f64::NEG_INFINITY, f64::INFINITY); k],
            norm_bounds: None,
            chance_constraints: Vec::new(),
            horizon,
            initial_control: ControlVector::zeros(k),
            state_scale: DVector::from_element(n, 1.0),
            control_scale: DVector::from_element(k, 1.0),
            time_scale: 1.0,
            steps_per_interval: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.model.state_dim(), self.model.control_dim());
        check_dim("initial belief", n, self.init.dim())?;
        self.cost.validate()?;
        check_dim("cost", n, self.cost.state_dim())?;
        check_dim("control weights", k, self.cost.control_weights.len())?;
        check_dim("control box", k, self.control_box.len())?;
        check_dim("initial control", k, self.initial_control.dim())?;
        check_dim("state scale", n, self.state_scale.len())?;
        check_dim("control scale", k, self.control_scale.len())?;
        if let Some(t) = &self.target {
            t.validate(n)?;
        }
        for (j, &(lo, hi)) in self.control_box.iter().enumerate() {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("empty box on control {j}")));
            }
            let u = self.initial_control[j];
            if u < lo || u > hi {
                return Err(Error::InvalidArgument(format!("initial control {j} = {u} outside its box")));
            }
        }
        if let Some((lo, hi)) = self.norm_bounds {
            if !(0.0 <= lo && lo <= hi) {
                return Err(Error::InvalidArgument("norm bounds must satisfy 0 <= min <= max".into()));
            }
        }
        for c in &self.chance_constraints {
            c.validate(n, k)?;
        }
        if self.state_scale.iter().chain(self.control_scale.iter()).any(|s| !(*s > 0.0)) || !(self.time_scale > 0.0) {
            return Err(Error::InvalidArgument("scales must be positive".into()));
        }
        if self.steps_per_interval == 0 {
            return Err(Error::InvalidArgument("steps_per_interval must be >= 1".into()));
        }
        match self.horizon {
            Horizon::Fixed(tf) if !(tf > 0.0) => Err(Error::InvalidArgument("horizon must be positive".into())),
            Horizon::Free { min, max, guess } if !(min > 0.0 && min <= guess && guess <= max && max.is_finite()) => Err(
                Error::InvalidArgument(format!("free horizon needs 0 < min <= guess <= max < inf, got [{min}, {max}] ({guess})")),
            ),
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Transcription

/// Position of each block in the decision vector: node controls first, then
/// the final time when free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Layout {
    pub n_nodes: usize,
    pub control_dim: usize,
    pub free_tf: bool,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.n_nodes * self.control_dim + self.free_tf as usize
    }

    pub fn control_range(&self, node: usize) -> Range<usize> {
        node * self.control_dim..(node + 1) * self.control_dim
    }

    pub fn tf_index(&self) -> Option<usize> {
        self.free_tf.then_some(self.n_nodes * self.control_dim)
    }

    /// Node whose control the decision entry `i` belongs to, `None` for the
    /// final time.
    pub fn node_of(&self, i: usize) -> Option<usize> {
        (i < self.n_nodes * self.control_dim).then(|| i / self.control_dim)
    }
}

/// A robust OCP turned into a nonlinear program on the scaled decision.
#[derive(Debug, Clone)]
pub struct TranscribedNlp {
    pub ocp: RobustOcp,
    pub layout: Layout,
    rows_per_node: usize,
    row_scale: DVector<f64>,
    cost_scale: f64,
}

pub fn transcribe(ocp: RobustOcp, n_nodes: usize) -> Result<TranscribedNlp> {
    if n_nodes < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 nodes, got {n_nodes}")));
    }
    ocp.validate()?;
    let layout = Layout {
        n_nodes,
        control_dim: ocp.model.control_dim(),
        free_tf: matches!(ocp.horizon, Horizon::Free { .. }),
    };
    let rows_per_node = 2 * ocp.norm_bounds.is_some() as usize + ocp.chance_constraints.len();
    let row_scale = match &ocp.target {
        Some(t) => DVector::from_iterator(
            t.selector.nrows(),
            t.selector.row_iter().map(|r| r.iter().zip(ocp.state_scale.iter()).map(|(a, s)| a.abs() * s).sum::<f64>()),
        ),
        None => DVector::zeros(0),
    };
    let mut nlp = TranscribedNlp {
        ocp,
        layout,
        rows_per_node,
        row_scale,
        cost_scale: 1.0,
    };
    let z0 = nlp.initial_decision();
    let j0 = evaluate_objective(&nlp, &z0).map_err(|e| Error::Solver(format!("initial guess cannot be propagated: {e}")))?.0;
    nlp.cost_scale = if j0.abs() > 1e-12 { 1.0 / j0.abs() } else { 1.0 };
    Ok(nlp)
}

/// Objective, constraints and cost terms at one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Scaled objective.
    pub objective: f64,
    pub breakdown: CostBreakdown,
    /// Scaled terminal rows, feasible at zero.
    pub eq: DVector<f64>,
    /// Per-node rows, feasible when `<= 0`.
    pub ineq: DVector<f64>,
    pub tf: f64,
}

impl TranscribedNlp {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_eq(&self) -> usize {
        self.row_scale.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.rows_per_node * self.layout.n_nodes
    }

    pub fn rows_per_node(&self) -> usize {
        self.rows_per_node
    }

    /// Factor applied to the physical objective.
    pub fn cost_scale(&self) -> f64 {
        self.cost_scale
    }

    pub fn with_cost_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument("cost scale must be positive".into()));
        }
        self.cost_scale = scale;
        Ok(self)
    }

    pub fn pack(&self, controls: &[ControlVector], tf: f64) -> Result<DVector<f64>> {
        check_dim("node controls", self.layout.n_nodes, controls.len())?;
        let mut z = DVector::zeros(self.dim());
        for (i, u) in controls.iter().enumerate() {
            check_dim("node control", self.layout.control_dim, u.dim())?;
            for (j, zi) in self.layout.control_range(i).enumerate() {
                z[zi] = u[j] / self.ocp.control_scale[j];
            }
        }
        if let Some(ti) = self.layout.tf_index() {
            z[ti] = tf / self.ocp.time_scale;
        }
        Ok(z)
    }

    pub fn unpack(&self, z: &DVector<f64>) -> Result<(Vec<ControlVector>, f64)> {
        check_dim("decision", self.dim(), z.len())?;
        let controls = (0..self.layout.n_nodes)
            .map(|i| ControlVector(DVector::from_iterator(self.layout.control_dim, self.decode(z, i))))
            .collect();
        Ok((controls, self.final_time(z)))
    }

    fn decode<'a>(&'a self, z: &'a DVector<f64>, node: usize) -> impl Iterator<Item = f64> + 'a {
        self.layout.control_range(node).zip(self.ocp.control_scale.iter()).map(move |(i, s)| z[i] * s)
    }

    pub fn final_time(&self, z: &DVector<f64>) -> f64 {
        match self.ocp.horizon {
            Horizon::Fixed(tf) => tf,
            Horizon::Free { .. } => z[self.layout.tf_index().unwrap()] * self.ocp.time_scale,
        }
    }

    /// Box bounds on the scaled decision.
    pub fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let d = self.dim();
        let (mut lo, mut hi) = (DVector::zeros(d), DVector::zeros(d));
        for i in 0..self.layout.n_nodes {
            for (j, zi) in self.layout.control_range(i).enumerate() {
                let (a, b) = self.ocp.control_box[j];
                let s = self.ocp.control_scale[j];
                lo[zi] = a / s;
                hi[zi] = b / s;
            }
        }
        if let (Some(ti), Horizon::Free { min, max, .. }) = (self.layout.tf_index(), self.ocp.horizon) {
            lo[ti] = min / self.ocp.time_scale;
            hi[ti] = max / self.ocp.time_scale;
        }
        (lo, hi)
    }

    pub fn initial_decision(&self) -> DVector<f64> {
        let controls = vec![self.ocp.initial_control.clone(); self.layout.n_nodes];
        let tf = match self.ocp.horizon {
            Horizon::Fixed(tf) => tf,
            Horizon::Free { guess, .. } => guess,
        };
        self.pack(&controls, tf).expect("layout is consistent")
    }

    pub fn control_trajectory(&self, z: &DVector<f64>) -> Result<ControlTrajectory> {
        let (controls, tf) = self.unpack(z)?;
        ControlTrajectory::uniform(tf, controls).map(|c| {
            debug_assert_eq!(c.mode(), Interpolation::PiecewiseConstant);
            c
        })
    }

    /// Belief trajectory at every RK4 sub-step, on the same grid the solver
    /// integrates.
    pub fn belief_trajectory(&self, z: &DVector<f64>) -> Result<BeliefTrajectory> {
        let ctrl = self.control_trajectory(z)?;
        crate::propagate::propagate(self.ocp.model.as_ref(), &self.ocp.init, &ctrl, self.ocp.steps_per_interval)
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> Result<Evaluation> {
        check_dim("decision", self.dim(), z.len())?;
        let mut shooter = Shooter::new(self);
        let mut eq = DVector::zeros(self.n_eq());
        let mut ineq = DVector::zeros(self.n_ineq());
        let breakdown = shooter.run(z, 0, None, None, &mut eq, &mut ineq)?;
        Ok(Evaluation {
            objective: breakdown.total() * self.cost_scale,
            breakdown,
            eq,
            ineq,
            tf: self.final_time(z),
        })
    }
}

/// Physical objective value and its terms.
pub fn evaluate_objective(nlp: &TranscribedNlp, z: &DVector<f64>) -> Result<(f64, CostBreakdown)> {
    check_dim("decision", nlp.dim(), z.len())?;
    let mut shooter = Shooter::new(nlp);
    let mut eq = DVector::zeros(nlp.n_eq());
    let mut ineq = DVector::zeros(nlp.n_ineq());
    let b = shooter.run(z, 0, None, None, &mut eq, &mut ineq)?;
    Ok((b.total(), b))
}

// ---------------------------------------------------------------------------
// Shooting

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    running_mean: f64,
    running_cov: f64,
    control: f64,
}

/// Node states and accumulated running terms of a full shooting pass.
#[derive(Debug, Clone, Default)]
struct NodeTrace {
    m: Vec<DVector<f64>>,
    p: Vec<DMatrix<f64>>,
    acc: Vec<Accum>,
}

struct Shooter<'a> {
    nlp: &'a TranscribedNlp,
    rk: LiftedRk4,
    m: DVector<f64>,
    p: DMatrix<f64>,
    u: DVector<f64>,
    qf: DMatrix<f64>,
    q: Option<DMatrix<f64>>,
    /// Reject covariances that leave the PSD cone. Off inside derivative
    /// stencils, which only probe a neighbourhood of an accepted point.
    check_psd: bool,
}

/// Cheap form of the PSD test used by propagation: `P + tol I` admits a
/// Cholesky factor.
fn nearly_psd(p: &DMatrix<f64>) -> bool {
    let tol = PSD_TOL * (1.0 + p.trace().abs());
    let mut shifted = p.clone();
    for i in 0..p.nrows() {
        shifted[(i, i)] += tol;
    }
    shifted.cholesky().is_some()
}

impl<'a> Shooter<'a> {
    fn new(nlp: &'a TranscribedNlp) -> Self {
        let model = nlp.ocp.model.as_ref();
        let (n, k) = (model.state_dim(), model.control_dim());
        let cost = &nlp.ocp.cost;
        Self {
            nlp,
            rk: LiftedRk4::for_model(model),
            m: DVector::zeros(n),
            p: DMatrix::zeros(n, n),
            u: DVector::zeros(k),
            qf: cost.terminal_cov_weight(),
            q: (!cost.has_control_dependent_hessian()).then(|| cost.running_cov_weight(&DVector::zeros(k))),
            check_psd: true,
        }
    }

    fn without_psd_check(mut self) -> Self {
        self.check_psd = false;
        self
    }

    fn node_rows(&self, out: &mut [f64]) {
        let ocp = &self.nlp.ocp;
        let mut r = 0;
        if let Some((lo, hi)) = ocp.norm_bounds {
            let norm = self.u.norm();
            out[0] = lo - norm;
            out[1] = norm - hi;
            r = 2;
        }
        for c in &ocp.chance_constraints {
            out[r] = c.value(self.u.as_slice(), self.m.as_slice(), &self.p);
            r += 1;
        }
    }

    fn running_terms(&self, q: &DMatrix<f64>) -> (f64, f64) {
        let cost = &self.nlp.ocp.cost;
        let mean = cost.running_value(&self.m, &self.u) - cost.control_penalty(&self.u);
        (mean, trace_product(q, &self.p))
    }

    /// Writes the rows of node `node` and integrates one control interval
    /// from the current state with sub-step `h`. Returns the running terms
    /// accrued over the interval.
    fn interval(&mut self, node: usize, h: f64, rows: &mut [f64]) -> Result<Accum> {
        let ocp = &self.nlp.ocp;
        let model = ocp.model.as_ref();
        let cost = &ocp.cost;
        let steps = ocp.steps_per_interval;
        self.node_rows(rows);
        let q_owned;
        let q = match &self.q {
            Some(q) => q,
            None => {
                q_owned = cost.running_cov_weight(&self.u);
                &q_owned
            }
        };
        let ctrl_pen = cost.control_penalty(&self.u);
        let mut acc = Accum::default();
        for s in 0..steps {
            let (la, ca) = self.running_terms(q);
            self.rk.step(model, &mut self.m, &mut self.p, h, &self.u, &self.u, &self.u).map_err(|e| match e {
                Error::ModelBreach(reason) | Error::NonFinite(reason) => Error::BlowUp {
                    time: h * (node * steps + s) as f64,
                    reason,
                },
                other => other,
            })?;
            if !all_finite(&self.m, &self.p) {
                return Err(Error::BlowUp {
                    time: h * (node * steps + s + 1) as f64,
                    reason: "non-finite mean or covariance".into(),
                });
            }
            if self.check_psd && !nearly_psd(&self.p) {
                return Err(Error::NotPsd {
                    time: h * (node * steps + s + 1) as f64,
                    min_eig: min_eigenvalue(&self.p),
                });
            }
            let (lb, cb) = self.running_terms(q);
            acc.running_mean += 0.5 * h * (la + lb);
            acc.running_cov += 0.5 * h * (ca + cb);
            acc.control += h * ctrl_pen;
        }
        Ok(acc)
    }

    /// Shoots from node `start` (restarting from `base` when `start > 0`).
    /// Rows of `ineq` before `start` are left untouched.
    fn run(
        &mut self,
        z: &DVector<f64>,
        start: usize,
        base: Option<&NodeTrace>,
        mut record: Option<&mut NodeTrace>,
        eq: &mut DVector<f64>,
        ineq: &mut DVector<f64>,
    ) -> Result<CostBreakdown> {
        let nlp = self.nlp;
        let ocp = &nlp.ocp;
        let n_nodes = nlp.layout.n_nodes;
        let tf = nlp.final_time(z);
        if !(tf > 0.0 && tf.is_finite()) {
            return Err(Error::InvalidArgument(format!("final time {tf} is not positive")));
        }
        let steps = ocp.steps_per_interval;
        let h = tf / (n_nodes * steps) as f64;
        let mut acc = match (start, base) {
            (0, _) => {
                self.m.copy_from(&ocp.init.mean);
                self.p.copy_from(ocp.init.cov.matrix());
                Accum::default()
            }
            (s, Some(b)) => {
                self.m.copy_from(&b.m[s]);
                self.p.copy_from(&b.p[s]);
                b.acc[s]
            }
            _ => return Err(Error::InvalidArgument("suffix shooting needs a base trace".into())),
        };
        if let Some(rec) = record.as_deref_mut() {
            rec.m.clear();
            rec.p.clear();
            rec.acc.clear();
            rec.m.push(self.m.clone());
            rec.p.push(self.p.clone());
            rec.acc.push(acc);
        }
        let rpn = nlp.rows_per_node;
        for i in start..n_nodes {
            for (j, v) in nlp.decode(z, i).enumerate() {
                self.u[j] = v;
            }
            let inc = self.interval(i, h, &mut ineq.as_mut_slice()[i * rpn..(i + 1) * rpn])?;
            acc.running_mean += inc.running_mean;
            acc.running_cov += inc.running_cov;
            acc.control += inc.control;
            if let Some(rec) = record.as_deref_mut() {
                rec.m.push(self.m.clone());
                rec.p.push(self.p.clone());
                rec.acc.push(acc);
            }
        }
        if let Some(t) = &ocp.target {
            let r = &t.selector * &self.m - &t.value;
            for (k, v) in r.iter().enumerate() {
                eq[k] = v / nlp.row_scale[k];
            }
        }
        let cost = &ocp.cost;
        let b = CostBreakdown {
            terminal_mean: cost.terminal.eval(&self.m),
            terminal_cov: trace_product(&self.qf, &self.p),
            running_mean: acc.running_mean,
            running_cov: acc.running_cov,
            control: acc.control,
        };
        if !b.total().is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        Ok(b)
    }
}

fn fd_step(zi: f64, rel: f64) -> f64 {
    rel * zi.abs().max(1.0)
}

/// Packed belief `(m, vech P)`; an off-diagonal coordinate moves both
/// mirrored entries.
struct BeliefCoords {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl BeliefCoords {
    fn new(n: usize) -> Self {
        let pairs = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        Self { n, pairs }
    }

    fn len(&self) -> usize {
        self.n + self.pairs.len()
    }

    fn get(&self, m: &DVector<f64>, p: &DMatrix<f64>, c: usize) -> f64 {
        if c < self.n {
            m[c]
        } else {
            let (i, j) = self.pairs[c - self.n];
            p[(i, j)]
        }
    }

    fn shift(&self, m: &mut DVector<f64>, p: &mut DMatrix<f64>, c: usize, d: f64) {
        if c < self.n {
            m[c] += d;
        } else {
            let (i, j) = self.pairs[c - self.n];
            p[(i, j)] += d;
            if i != j {
                p[(j, i)] += d;
            }
        }
    }

    fn pack(&self, m: &DVector<f64>, p: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|c| self.get(m, p, c)))
    }
}

/// Central-difference sensitivities of one interval with respect to
/// `(belief, u, h)`.
struct StageJacobian {
    /// Next belief, `ns x (ns + k + 1)`.
    state: DMatrix<f64>,
    /// Scaled running cost over the interval.
    cost: DVector<f64>,
    /// Rows of the interval's node, `rows_per_node x (ns + k + 1)`.
    rows: DMatrix<f64>,
}

/// Everything needed to pull weighted combinations of the objective and the
/// rows back onto the decision.
struct Sensitivities {
    stages: Vec<StageJacobian>,
    terminal_cost: DVector<f64>,
    /// `n_eq x ns`.
    terminal_eq: DMatrix<f64>,
}

impl Shooter<'_> {
    #[allow(clippy::too_many_arguments)]
    fn stage_jacobian(
        &mut self,
        coords: &BeliefCoords,
        node: usize,
        m: &DVector<f64>,
        p: &DMatrix<f64>,
        u: &[f64],
        h: f64,
        rel: f64,
    ) -> Result<StageJacobian> {
        let ns = coords.len();
        let k = u.len();
        let cols = ns + k + 1;
        let rpn = self.nlp.rows_per_node;
        let mut state = DMatrix::zeros(ns, cols);
        let mut cost = DVector::zeros(cols);
        let mut rows = DMatrix::zeros(rpn, cols);
        let (mut r_plus, mut r_minus) = (vec![0.0; rpn], vec![0.0; rpn]);
        for c in 0..cols {
            let d = if c < ns {
                fd_step(coords.get(m, p, c), rel)
            } else if c < ns + k {
                // Same step the decision would take in scaled units.
                let scale = self.nlp.ocp.control_scale[c - ns];
                scale * fd_step(u[c - ns] / scale, rel)
            } else {
                fd_step(h, rel)
            };
            let eval = |sign: f64, this: &mut Self, r: &mut [f64]| -> Result<(DVector<f64>, f64)> {
                this.m.copy_from(m);
                this.p.copy_from(p);
                this.u.copy_from_slice(u);
                let mut hh = h;
                if c < ns {
                    coords.shift(&mut this.m, &mut this.p, c, sign * d);
                } else if c < ns + k {
                    this.u[c - ns] += sign * d;
                } else {
                    hh += sign * d;
                }
                let inc = this.interval(node, hh, r)?;
                let run = inc.running_mean + inc.running_cov + inc.control;
                Ok((coords.pack(&this.m, &this.p), this.nlp.cost_scale * run))
            };
            let (op, cp) = eval(1.0, self, &mut r_plus)?;
            let (om, cm) = eval(-1.0, self, &mut r_minus)?;
            let w = 1.0 / (2.0 * d);
            state.set_column(c, &((op - om) * w));
            cost[c] = (cp - cm) * w;
            for r in 0..rpn {
                rows[(r, c)] = (r_plus[r] - r_minus[r]) * w;
            }
        }
        Ok(StageJacobian { state, cost, rows })
    }

    fn scaled_terminal_cost(&self) -> f64 {
        let cost = &self.nlp.ocp.cost;
        self.nlp.cost_scale * (cost.terminal.eval(&self.m) + trace_product(&self.qf, &self.p))
    }
}

impl Sensitivities {
    fn new(nlp: &TranscribedNlp, z: &DVector<f64>, trace: &NodeTrace, rel: f64) -> Result<Self> {
        let ocp = &nlp.ocp;
        let n = ocp.model.state_dim();
        let n_nodes = nlp.layout.n_nodes;
        let coords = BeliefCoords::new(n);
        let ns = coords.len();
        let h = nlp.final_time(z) / (n_nodes * ocp.steps_per_interval) as f64;
        let stages = (0..n_nodes)
            .into_par_iter()
            .map_init(
                || Shooter::new(nlp).without_psd_check(),
                |shooter, i| {
                    let u: Vec<f64> = nlp.decode(z, i).collect();
                    shooter.stage_jacobian(&coords, i, &trace.m[i], &trace.p[i], &u, h, rel)
                },
            )
            .collect::<Result<Vec<_>>>()?;

        let mut shooter = Shooter::new(nlp);
        let (m_f, p_f) = (&trace.m[n_nodes], &trace.p[n_nodes]);
        let mut terminal_cost = DVector::zeros(ns);
        for c in 0..ns {
            let d = fd_step(coords.get(m_f, p_f, c), rel);
            let mut side = |sign: f64| {
                shooter.m.copy_from(m_f);
                shooter.p.copy_from(p_f);
                coords.shift(&mut shooter.m, &mut shooter.p, c, sign * d);
                shooter.scaled_terminal_cost()
            };
            terminal_cost[c] = (side(1.0) - side(-1.0)) / (2.0 * d);
        }
        let mut terminal_eq = DMatrix::zeros(nlp.n_eq(), ns);
        if let Some(t) = &ocp.target {
            for r in 0..nlp.n_eq() {
                for j in 0..n {
                    terminal_eq[(r, j)] = t.selector[(r, j)] / nlp.row_scale[r];
                }
            }
        }
        Ok(Self {
            stages,
            terminal_cost,
            terminal_eq,
        })
    }

    /// Gradients on the decision of `c` combinations
    /// `wc[j] * f + w_eq[.., j] . eq + w_in[.., j] . ineq`, one per column.
    fn pullback(&self, nlp: &TranscribedNlp, wc: &[f64], w_eq: &DMatrix<f64>, w_in: &DMatrix<f64>) -> DMatrix<f64> {
        let ocp = &nlp.ocp;
        let c = wc.len();
        let k = nlp.layout.control_dim;
        let rpn = nlp.rows_per_node;
        let ns = self.terminal_cost.len();
        let wc_row = DMatrix::from_row_slice(1, c, wc);
        let mut adj = &self.terminal_cost * &wc_row + self.terminal_eq.tr_mul(w_eq);
        let mut grad = DMatrix::zeros(nlp.dim(), c);
        let mut d_h = DMatrix::zeros(1, c);
        for (i, st) in self.stages.iter().enumerate().rev() {
            let mut total = st.state.tr_mul(&adj) + &st.cost * &wc_row;
            if rpn > 0 {
                total += st.rows.tr_mul(&w_in.rows(i * rpn, rpn));
            }
            for (j, zi) in nlp.layout.control_range(i).enumerate() {
                grad.row_mut(zi).copy_from(&(total.row(ns + j) * ocp.control_scale[j]));
            }
            d_h += total.row(ns + k);
            adj = total.rows(0, ns).into_owned();
        }
        if let Some(ti) = nlp.layout.tf_index() {
            let s = ocp.time_scale / (nlp.layout.n_nodes * ocp.steps_per_interval) as f64;
            grad.row_mut(ti).copy_from(&(d_h * s));
        }
        grad
    }
}

/// Objective, rows, merit gradient and the scaled Jacobian of the rows the
/// penalty currently acts on.
struct Point {
    f: f64,
    eq: DVector<f64>,
    ineq: DVector<f64>,
    grad: DVector<f64>,
    /// `sqrt(rho)` times the gradients of active rows, one per column.
    active: DMatrix<f64>,
}

fn shoot_traced(nlp: &TranscribedNlp, z: &DVector<f64>) -> Result<(f64, DVector<f64>, DVector<f64>, NodeTrace)> {
    let mut trace = NodeTrace::default();
    let mut eq = DVector::zeros(nlp.n_eq());
    let mut ineq = DVector::zeros(nlp.n_ineq());
    let f = Shooter::new(nlp).run(z, 0, None, Some(&mut trace), &mut eq, &mut ineq)?.total() * nlp.cost_scale;
    Ok((f, eq, ineq, trace))
}

fn point(nlp: &TranscribedNlp, z: &DVector<f64>, mult: &Multipliers, rel: f64) -> Result<Point> {
    let (f, eq, ineq, trace) = shoot_traced(nlp, z)?;
    let sens = Sensitivities::new(nlp, z, &trace, rel)?;
    let (w_eq, w_in) = mult.weights(&eq, &ineq);
    let active_in: Vec<usize> = (0..ineq.len()).filter(|&r| w_in[r] > 0.0).collect();
    let c = 1 + eq.len() + active_in.len();
    let mut wc = vec![0.0; c];
    wc[0] = 1.0;
    let mut we = DMatrix::zeros(eq.len(), c);
    let mut wi = DMatrix::zeros(ineq.len(), c);
    we.set_column(0, &w_eq);
    wi.set_column(0, &DVector::from_column_slice(&w_in));
    let root = mult.rho.sqrt();
    for r in 0..eq.len() {
        we[(r, 1 + r)] = root;
    }
    for (j, &r) in active_in.iter().enumerate() {
        wi[(r, 1 + eq.len() + j)] = root;
    }
    let g = sens.pullback(nlp, &wc, &we, &wi);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("merit gradient".into()));
    }
    Ok(Point {
        f,
        eq,
        ineq,
        grad: g.column(0).into_owned(),
        active: g.columns(1, c - 1).into_owned(),
    })
}

/// Brute-force forward differences of the scaled objective, re-shooting
/// only the suffix after each perturbed node.
fn suffix_gradient(nlp: &TranscribedNlp, z: &DVector<f64>, rel: f64) -> Result<DVector<f64>> {
    let (_, upper) = nlp.bounds();
    let (f, eq, ineq, trace) = shoot_traced(nlp, z)?;
    let columns: Vec<Result<f64>> = (0..nlp.dim())
        .into_par_iter()
        .map_init(
            || (Shooter::new(nlp), z.clone(), eq.clone(), ineq.clone()),
            |(shooter, zp, eq_p, ineq_p), i| {
                let start = nlp.layout.node_of(i).unwrap_or(0);
                let mut h = fd_step(z[i], rel);
                if z[i] + h > upper[i] {
                    h = -h;
                }
                zp[i] = z[i] + h;
                let out = shooter.run(zp, start, Some(&trace), None, eq_p, ineq_p);
                zp[i] = z[i];
                Ok((out?.total() * nlp.cost_scale - f) / h)
            },
        )
        .collect();
    columns.into_iter().collect::<Result<Vec<_>>>().map(DVector::from_vec)
}

// ---------------------------------------------------------------------------
// Augmented Lagrangian

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_outer: usize,
    /// Inner iterations per outer iteration.
    pub max_inner: usize,
    /// Cap on inner iterations over the whole solve.
    pub max_total_inner: usize,
    pub penalty_init: f64,
    pub penalty_max: f64,
    /// Secant pairs kept for the curvature not explained by the penalty.
    pub lbfgs_memory: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Warm start in scaled decision units.
    pub initial: Option<DVector<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-5,
            tol_feas: 1e-6,
            max_outer: 40,
            max_inner: 400,
            max_total_inner: 4000,
            penalty_init: 10.0,
            penalty_max: 1e10,
            lbfgs_memory: 10,
            fd_step: 1e-6,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Feasible, but the line search can no longer decrease the merit.
    Stalled,
    MaxIterations,
}

/// Merit before and after one inner minimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuterRecord {
    pub penalty: f64,
    pub merit_start: f64,
    pub merit_end: f64,
    pub feasibility: f64,
    pub kkt: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    /// Scaled decision.
    pub decision: Vec<f64>,
    /// Physical node controls.
    pub controls: Vec<Vec<f64>>,
    pub tf: f64,
    /// Physical objective.
    pub objective: f64,
    pub breakdown: CostBreakdown,
    /// Largest scaled terminal residual.
    pub eq_violation: f64,
    /// Largest positive per-node row.
    pub ineq_violation: f64,
    pub kkt: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub status: SolveStatus,
    pub converged: bool,
    pub history: Vec<OuterRecord>,
}

impl SolveReport {
    pub fn decision_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.decision)
    }
}

struct Multipliers {
    lambda: DVector<f64>,
    mu: DVector<f64>,
    rho: f64,
}

impl Multipliers {
    fn merit(&self, f: f64, eq: &DVector<f64>, ineq: &DVector<f64>) -> f64 {
        let rho = self.rho;
        let mut v = f;
        for (l, c) in self.lambda.iter().zip(eq.iter()) {
            v += l * c + 0.5 * rho * c * c;
        }
        for (m, g) in self.mu.iter().zip(ineq.iter()) {
            let s = (m + rho * g).max(0.0);
            v += (s * s - m * m) / (2.0 * rho);
        }
        v
    }

    fn weights(&self, eq: &DVector<f64>, ineq: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let rho = self.rho;
        let w_eq = &self.lambda + eq * rho;
        let w_in = self.mu.iter().zip(ineq.iter()).map(|(m, g)| (m + rho * g).max(0.0)).collect();
        (w_eq, w_in)
    }
}

fn feasibility(eq: &DVector<f64>, ineq: &DVector<f64>) -> f64 {
    let e = eq.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    ineq.iter().fold(e, |a, v| a.max(*v))
}

fn projected_gradient_norm(z: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    z.iter()
        .zip(g.iter())
        .zip(lo.iter().zip(hi.iter()))
        .map(|((zi, gi), (l, h))| (zi - gi).clamp(*l, *h) - zi)
        .fold(0.0, |a: f64, v| a.max(v.abs()))
}

enum InnerExit {
    Tolerance,
    Stalled,
    Budget,
}

/// Merit Hessian model `sigma I + V V^T + B_r`, where `V` holds the scaled
/// gradients of the penalized rows and `B_r` is a compact limited-memory
/// BFGS term built from the residual curvature.
struct StructuredModel {
    memory: usize,
    sigma: f64,
    pairs: VecDeque<(DVector<f64>, DVector<f64>)>,
}

impl StructuredModel {
    fn new(memory: usize) -> Self {
        Self {
            memory,
            sigma: 1.0,
            pairs: VecDeque::new(),
        }
    }

    fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn reset(&mut self) {
        self.pairs.clear();
    }

    /// Records a step `s` with gradient change `y`, removing the part the
    /// penalty block `V` already predicts.
    fn update(&mut self, s: DVector<f64>, y: &DVector<f64>, v: &DMatrix<f64>) {
        let yr = y - v * v.tr_mul(&s);
        let sy = s.dot(&yr);
        if !(sy > 1e-10 * s.norm() * yr.norm()) {
            return;
        }
        self.sigma = (yr.dot(&yr) / sy).clamp(1e-8, 1e8);
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, yr));
    }

    /// Newton direction of the model restricted to the free variables.
    fn direction(&self, g: &DVector<f64>, free: &[bool], v: &DMatrix<f64>) -> Option<DVector<f64>> {
        let fi: Vec<usize> = (0..g.len()).filter(|&i| free[i]).collect();
        let sigma = self.sigma;
        let m = self.pairs.len();
        let r = v.ncols();
        // B_r = sigma I - W M^{-1} W^T with W = [Y, sigma S].
        let mut e = DMatrix::zeros(fi.len(), r + 2 * m);
        for (a, &i) in fi.iter().enumerate() {
            for j in 0..r {
                e[(a, j)] = v[(i, j)];
            }
            for (j, (s, y)) in self.pairs.iter().enumerate() {
                e[(a, r + j)] = y[i];
                e[(a, r + m + j)] = sigma * s[i];
            }
        }
        let mut k = e.tr_mul(&e);
        for j in 0..r {
            k[(j, j)] += sigma;
        }
        // Block of sigma * (-M) with M = [[-D, L^T], [L, sigma S^T S]].
        for (a, (sa, ya)) in self.pairs.iter().enumerate() {
            k[(r + a, r + a)] += sigma * sa.dot(ya);
            for (b, (sb, yb)) in self.pairs.iter().enumerate() {
                if a > b {
                    let l = sa.dot(yb);
                    k[(r + m + a, r + b)] -= sigma * l;
                    k[(r + b, r + m + a)] -= sigma * l;
                }
                k[(r + m + a, r + m + b)] -= sigma * sigma * sa.dot(sb);
            }
        }
        let gf = DVector::from_iterator(fi.len(), fi.iter().map(|&i| g[i]));
        let x = if k.nrows() > 0 { k.lu().solve(&e.tr_mul(&gf))? } else { DVector::zeros(0) };
        let df = -(gf - &e * x) / sigma;
        let mut d = DVector::zeros(g.len());
        for (a, &i) in fi.iter().enumerate() {
            d[i] = df[a];
        }
        d.iter().all(|v| v.is_finite()).then_some(d)
    }
}

struct Inner<'a> {
    nlp: &'a TranscribedNlp,
    lo: DVector<f64>,
    hi: DVector<f64>,
    opts: &'a SolveOptions,
}

impl Inner<'_> {
    fn merit_at(&self, mult: &Multipliers, z: &DVector<f64>) -> f64 {
        match self.nlp.evaluate(z) {
            Ok(e) => mult.merit(e.objective, &e.eq, &e.ineq),
            Err(_) => f64::INFINITY,
        }
    }

    /// Projected quasi-Newton on the merit. Returns the final decision, its
    /// point and the projected-gradient norm.
    fn minimize(
        &self,
        mult: &Multipliers,
        model: &mut StructuredModel,
        mut z: DVector<f64>,
        tol: f64,
        budget: usize,
        iterations: &mut usize,
    ) -> Result<(DVector<f64>, Point, f64, InnerExit)> {
        let mut pt = point(self.nlp, &z, mult, self.opts.fd_step)?;
        let mut f = mult.merit(pt.f, &pt.eq, &pt.ineq);
        let mut used = 0;
        loop {
            let g = &pt.grad;
            let pg = projected_gradient_norm(&z, g, &self.lo, &self.hi);
            if pg <= tol {
                return Ok((z, pt, pg, InnerExit::Tolerance));
            }
            if used >= budget {
                return Ok((z, pt, pg, InnerExit::Budget));
            }
            // Variables held at a bound by the gradient are frozen.
            let free: Vec<bool> = (0..z.len())
                .map(|i| !((z[i] <= self.lo[i] && g[i] > 0.0) || (z[i] >= self.hi[i] && g[i] < 0.0)))
                .collect();
            let d = match model.direction(g, &free, &pt.active) {
                Some(d) if g.dot(&d) < 0.0 => d,
                _ => {
                    model.reset();
                    let mut d = -g / model.sigma;
                    for (x, f) in d.iter_mut().zip(&free) {
                        if !f {
                            *x = 0.0;
                        }
                    }
                    d
                }
            };
            let mut step = (0.5 / d.amax().max(1e-300)).min(1.0);
            let mut accepted = None;
            for _ in 0..40 {
                let trial = DVector::from_iterator(
                    z.len(),
                    z.iter().zip(d.iter()).zip(self.lo.iter().zip(self.hi.iter())).map(|((zi, di), (l, h))| (zi + step * di).clamp(*l, *h)),
                );
                let ft = self.merit_at(mult, &trial);
                let decrease = g.dot(&(&trial - &z));
                if ft.is_finite() && ft <= f + 1e-4 * decrease && decrease < 0.0 {
                    accepted = Some((trial, ft));
                    break;
                }
                step *= 0.5;
            }
            let Some((z_new, f_new)) = accepted else {
                if !model.is_empty() {
                    model.reset();
                    continue;
                }
                return Ok((z, pt, pg, InnerExit::Stalled));
            };
            let pt_new = point(self.nlp, &z_new, mult, self.opts.fd_step)?;
            model.update(&z_new - &z, &(&pt_new.grad - &pt.grad), &pt_new.active);
            z = z_new;
            pt = pt_new;
            f = f_new;
            used += 1;
            *iterations += 1;
        }
    }
}

/// Solves the transcribed problem from the default or supplied start.
pub fn solve(nlp: &TranscribedNlp, opts: &SolveOptions) -> Result<SolveReport> {
    let (lo, hi) = nlp.bounds();
    let z0 = match &opts.initial {
        Some(z) => {
            check_dim("initial decision", nlp.dim(), z.len())?;
            z.clone()
        }
        None => nlp.initial_decision(),
    };
    let mut z = DVector::from_iterator(z0.len(), z0.iter().zip(lo.iter().zip(hi.iter())).map(|(v, (l, h))| v.clamp(*l, *h)));
    let mut mult = Multipliers {
        lambda: DVector::zeros(nlp.n_eq()),
        mu: DVector::zeros(nlp.n_ineq()),
        rho: opts.penalty_init,
    };
    let inner = Inner {
        nlp,
        lo: lo.clone(),
        hi: hi.clone(),
        opts,
    };
    let mut model = StructuredModel::new(opts.lbfgs_memory);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut status = SolveStatus::MaxIterations;
    let mut kkt = f64::INFINITY;
    let e0 = nlp.evaluate(&z).map_err(|e| describe_failure(nlp, &z, e))?;
    let mut prev_feas = feasibility(&e0.eq, &e0.ineq);
    let mut merit_start = mult.merit(e0.objective, &e0.eq, &e0.ineq);
    let mut tol = 1e-2f64.max(opts.tol_kkt);
    for outer in 0..opts.max_outer {
        let budget = opts.max_inner.min(opts.max_total_inner.saturating_sub(iterations));
        let before = iterations;
        let (z_new, pt, pg, exit) =
            inner.minimize(&mult, &mut model, z, tol, budget, &mut iterations).map_err(|e| match e {
                Error::BlowUp { .. } | Error::NonFinite(_) => Error::Solver(format!("{e}")),
                other => other,
            })?;
        z = z_new;
        let merit_end = mult.merit(pt.f, &pt.eq, &pt.ineq);
        let feas = feasibility(&pt.eq, &pt.ineq);
        kkt = pg;
        history.push(OuterRecord {
            penalty: mult.rho,
            merit_start,
            merit_end,
            feasibility: feas,
            kkt,
            inner_iterations: iterations - before,
        });
        log::debug!(
            "outer {outer}: f = {:.6e}, tf = {:.3}, feas = {feas:.3e}, kkt = {kkt:.3e}, rho = {:.1e}, inner = {}",
            pt.f,
            nlp.final_time(&z),
            mult.rho,
            iterations - before
        );
        let rho = mult.rho;
        mult.lambda += &pt.eq * rho;
        for (m, g) in mult.mu.iter_mut().zip(pt.ineq.iter()) {
            *m = (*m + rho * g).max(0.0);
        }
        if feas <= opts.tol_feas && kkt <= opts.tol_kkt {
            status = SolveStatus::Converged;
            break;
        }
        let stalled = matches!(exit, InnerExit::Stalled) && iterations == before;
        if feas <= opts.tol_feas && stalled {
            status = SolveStatus::Stalled;
            break;
        }
        if iterations >= opts.max_total_inner {
            break;
        }
        if feas > 0.25 * prev_feas {
            mult.rho = (mult.rho * 10.0).min(opts.penalty_max);
        }
        prev_feas = prev_feas.min(feas);
        merit_start = mult.merit(pt.f, &pt.eq, &pt.ineq);
        tol = (tol * 0.1).max(opts.tol_kkt);
        if matches!(exit, InnerExit::Stalled) {
            tol = opts.tol_kkt;
        }
    }
    let (controls, tf) = nlp.unpack(&z)?;
    let eval = nlp.evaluate(&z)?;
    let eq_violation = eval.eq.amax();
    let ineq_violation = eval.ineq.iter().fold(0.0f64, |a, v| a.max(*v));
    Ok(SolveReport {
        decision: z.iter().copied().collect(),
        controls: controls.iter().map(|u| u.iter().copied().collect()).collect(),
        tf,
        objective: eval.breakdown.total(),
        breakdown: eval.breakdown,
        eq_violation,
        ineq_violation,
        kkt,
        iterations,
        outer_iterations: history.len(),
        converged: status == SolveStatus::Converged,
        status,
        history,
    })
}

fn describe_failure(nlp: &TranscribedNlp, z: &DVector<f64>, e: Error) -> Error {
    match e {
        Error::BlowUp { time, reason } => {
            let tf = nlp.final_time(z);
            let node = ((time / tf * nlp.layout.n_nodes as f64) as usize).min(nlp.layout.n_nodes - 1);
            let slice: Vec<f64> = z.as_slice()[nlp.layout.control_range(node)].to_vec();
            Error::Solver(format!("propagation failed at t = {time:.3} ({reason}); node {node} decision {slice:?}"))
        }
        Error::NonFinite(what) => Error::Solver(format!("non-finite {what} at decision with tf = {}", nlp.final_time(z))),
        other => other,
    }
}

/// Gradient of the scaled objective from the backward sweep over
/// central-difference interval sensitivities.
pub fn objective_gradient(nlp: &TranscribedNlp, z: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>> {
    check_dim("decision", nlp.dim(), z.len())?;
    let (_, _, _, trace) = shoot_traced(nlp, z)?;
    let sens = Sensitivities::new(nlp, z, &trace, rel_step)?;
    let g = sens.pullback(nlp, &[1.0], &DMatrix::zeros(nlp.n_eq(), 1), &DMatrix::zeros(nlp.n_ineq(), 1));
    Ok(g.column(0).into_owned())
}

/// Forward-difference gradient of the scaled objective, perturbing each
/// decision entry and re-shooting.
pub fn objective_gradient_fd(nlp: &TranscribedNlp, z: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>> {
    check_dim("decision", nlp.dim(), z.len())?;
    suffix_gradient(nlp, z, rel_step)
}
