//! Approximation-error functionals for statistical linearization, membership
//! in the admissible control class, and the time-rescaling controllability
//! probe. Matrix norms are Frobenius throughout.

use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::dynamics::{
    ControlTrajectory, ControlVector, CovarianceMatrix, DynamicsModel, GaussianBelief, Interpolation, StateVector,
};
use crate::error::{check_dim, Error, Result};
use crate::propagate::{propagate, BeliefTrajectory};
use crate::simulate::{check_grid_match, EnsembleStats};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Tolerance `epsilon` together with the Jacobian envelope `phi` and the
/// increasing amplification function `alpha`.
#[derive(Clone)]
pub struct ErrorBudget {
    pub epsilon: f64,
    phi: ScalarFn,
    alpha: ScalarFn,
}

impl std::fmt::Debug for ErrorBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ErrorBudget").field("epsilon", &self.epsilon).finish_non_exhaustive()
    }
}

impl ErrorBudget {
    pub fn new(
        epsilon: f64,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        Ok(Self {
            epsilon,
            phi: Arc::new(phi),
            alpha: Arc::new(alpha),
        })
    }

    /// `alpha(s) = C exp(C s)`.
    pub fn exponential(epsilon: f64, phi: impl Fn(f64) -> f64 + Send + Sync + 'static, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument("alpha constant must be positive".into()));
        }
        Self::new(epsilon, phi, move |s| c * (c * s).exp())
    }

    /// Constant `phi` equal to `envelope`, exponential `alpha` with the same
    /// constant.
    pub fn from_envelope(epsilon: f64, envelope: f64) -> Result<Self> {
        let c = envelope.max(f64::MIN_POSITIVE);
        Self::exponential(epsilon, move |_| envelope, c)
    }

    /// Disables the constraint: every control is a member.
    pub fn unconstrained(self) -> Self {
        Self {
            epsilon: f64::INFINITY,
            ..self
        }
    }

    pub fn phi(&self, r: f64) -> f64 {
        (self.phi)(r)
    }

    pub fn alpha(&self, s: f64) -> f64 {
        (self.alpha)(s)
    }

    /// Checks that `phi` and `alpha` are nonnegative and nondecreasing on
    /// the given sample points.
    pub fn validate_on(&self, samples: &[f64]) -> Result<()> {
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        for (name, f) in [("phi", &self.phi), ("alpha", &self.alpha)] {
            let values: Vec<f64> = sorted.iter().map(|&s| f(s)).collect();
            if values.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("{name} takes negative values")));
            }
            if values.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidArgument(format!("{name} is not nondecreasing")));
            }
        }
        Ok(())
    }
}

/// Sup of `|D_x f(m(t), u(t))|_F` along the mean of a belief trajectory and
/// any extra sampled states (e.g. Monte Carlo paths on the same grid).
pub fn empirical_jacobian_envelope<M: DynamicsModel + ?Sized>(
    model: &M,
    ctrl: &ControlTrajectory,
    traj: &BeliefTrajectory,
    extra_states: &[(f64, StateVector)],
) -> Result<f64> {
    let points = traj
        .times
        .iter()
        .zip(traj.beliefs.iter().map(|b| &b.mean))
        .map(|(t, m)| (*t, m))
        .chain(extra_states.iter().map(|(t, x)| (*t, x)));
    let n = model.state_dim();
    let mut jac = nalgebra::DMatrix::zeros(n, n);
    let mut sup: f64 = 0.0;
    for (t, x) in points {
        let u = ctrl.eval(t)?;
        model.jacobian(x, &u, &mut jac)?;
        sup = sup.max(jac.norm());
    }
    Ok(sup)
}

fn segment_controls(ctrl: &ControlTrajectory, traj: &BeliefTrajectory) -> Result<Vec<ControlVector>> {
    let tf = ctrl.horizon();
    if traj.len() < 2 || (traj.horizon() - tf).abs() > 1e-9 * (1.0 + tf) {
        return Err(Error::GridMismatch(format!(
            "belief horizon {} vs control horizon {tf}",
            traj.horizon()
        )));
    }
    traj.times.windows(2).map(|w| ctrl.eval(0.5 * (w[0] + w[1]))).collect()
}

/// `alpha(int phi(|u|) ds) * int phi(|u|) |P_hat(s)|_F ds`, trapezoidal on
/// the belief grid.
pub fn constraint_lhs(budget: &ErrorBudget, ctrl: &ControlTrajectory, traj: &BeliefTrajectory) -> Result<f64> {
    let us = segment_controls(ctrl, traj)?;
    let mut phi_int = 0.0;
    let mut weighted = 0.0;
    for (j, u) in us.iter().enumerate() {
        let dt = traj.times[j + 1] - traj.times[j];
        let phi = budget.phi(u.norm());
        phi_int += phi * dt;
        let pa = traj.beliefs[j].cov.frobenius();
        let pb = traj.beliefs[j + 1].cov.frobenius();
        weighted += phi * 0.5 * (pa + pb) * dt;
    }
    if weighted == 0.0 {
        return Ok(0.0);
    }
    Ok(budget.alpha(phi_int) * weighted)
}

/// Membership verdict; the functional value is reported either way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Membership {
    pub inside: bool,
    pub value: f64,
    pub epsilon: f64,
}

pub fn check_membership(budget: &ErrorBudget, ctrl: &ControlTrajectory, traj: &BeliefTrajectory) -> Result<Membership> {
    let value = constraint_lhs(budget, ctrl, traj)?;
    Ok(Membership {
        inside: value <= budget.epsilon,
        value,
        epsilon: budget.epsilon,
    })
}

/// `(sup_t |m - m_hat|^2, sup_t |P - P_hat|_F)` with the ensemble moments
/// standing in for the true ones.
pub fn empirical_error(traj: &BeliefTrajectory, stats: &EnsembleStats) -> Result<(f64, f64)> {
    check_grid_match(stats, traj)?;
    let mut mean_sq: f64 = 0.0;
    let mut cov: f64 = 0.0;
    for ((m, p), b) in stats.mean.iter().zip(&stats.cov).zip(&traj.beliefs) {
        mean_sq = mean_sq.max((&m.0 - &b.mean.0).norm_squared());
        cov = cov.max((p.matrix() - b.cov.matrix()).norm());
    }
    Ok((mean_sq, cov))
}

/// Constant of the bounded-control estimate.
#[derive(Debug, Clone)]
pub enum BoundConstant<'a> {
    Supplied(f64),
    /// `alpha(sup phi * tf) * sup phi`, the sup taken over the control samples.
    Estimated(&'a ErrorBudget),
}

/// `C int |P_hat(s)|_F ds`.
pub fn bounded_control_bound(traj: &BeliefTrajectory, ctrl: &ControlTrajectory, constant: BoundConstant<'_>) -> Result<f64> {
    let us = segment_controls(ctrl, traj)?;
    let c = match constant {
        BoundConstant::Supplied(c) => {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("bound constant must be positive".into()));
            }
            c
        }
        BoundConstant::Estimated(budget) => {
            let sup_phi = us.iter().map(|u| budget.phi(u.norm())).fold(0.0, f64::max);
            budget.alpha(sup_phi * traj.horizon()) * sup_phi
        }
    };
    let integral: f64 = traj
        .times
        .windows(2)
        .zip(traj.beliefs.windows(2))
        .map(|(t, b)| 0.5 * (t[1] - t[0]) * (b[0].cov.frobenius() + b[1].cov.frobenius()))
        .sum();
    Ok(c * integral)
}

/// One row of the controllability probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    pub eta: f64,
    pub constraint_value: f64,
    pub terminal_error: f64,
}

/// Probe settings.
#[derive(Debug, Clone)]
pub struct ProbeSetup {
    pub horizon: f64,
    pub steps_per_interval: usize,
}

/// `u_eta(t) = u_bar(t / eta) / eta` on `[0, eta]`, zero on `(eta, tf]`.
pub fn rescaled_control(base: &ControlTrajectory, eta: f64, horizon: f64) -> Result<ControlTrajectory> {
    if !(eta > 0.0) || eta > horizon * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("eta = {eta} outside (0, {horizon}]")));
    }
    if base.mode() != Interpolation::PiecewiseConstant {
        return Err(Error::InvalidArgument("base control must be piecewise constant".into()));
    }
    if (base.horizon() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument("base control must live on [0, 1]".into()));
    }
    let mut nodes: Vec<f64> = base.nodes().iter().map(|t| t * eta).collect();
    let mut values: Vec<ControlVector> = base.values().iter().map(|u| ControlVector(&u.0 / eta)).collect();
    if eta < horizon * (1.0 - 1e-12) {
        nodes.push(horizon);
        values.push(ControlVector::zeros(base.control_dim()));
    } else {
        *nodes.last_mut().unwrap() = horizon;
    }
    ControlTrajectory::new(nodes, values, Interpolation::PiecewiseConstant)
}

/// For each `eta`, propagates the statistical linearization under the
/// rescaled control and reports the constraint functional together with the
/// terminal mean error `|m_hat(tf) - m_f|`. `model` must be control-linear so
/// that rescaling preserves the mean endpoint.
pub fn controllability_probe<M: DynamicsModel + ?Sized>(
    model: &M,
    m0: &StateVector,
    mf: &StateVector,
    base_ctrl: &ControlTrajectory,
    eta_list: &[f64],
    p0: &CovarianceMatrix,
    budget: &ErrorBudget,
    setup: &ProbeSetup,
) -> Result<Vec<ProbeRow>> {
    check_dim("initial mean", model.state_dim(), m0.dim())?;
    check_dim("target mean", model.state_dim(), mf.dim())?;
    let init = GaussianBelief::new(m0.clone(), p0.clone())?;
    let rows: Vec<Result<ProbeRow>> = {
        use rayon::prelude::*;
        eta_list
            .par_iter()
            .map(|&eta| {
                let ctrl = rescaled_control(base_ctrl, eta, setup.horizon)?;
                let traj = propagate(model, &init, &ctrl, setup.steps_per_interval)?;
                let constraint_value = constraint_lhs(budget, &ctrl, &traj)?;
                let err: DVector<f64> = &traj.final_belief().mean.0 - &mf.0;
                Ok(ProbeRow {
                    eta,
                    constraint_value,
                    terminal_error: err.norm(),
                })
            })
            .collect()
    };
    rows.into_iter().collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn constant_cov_traj(p: f64, tf: f64, n: usize) -> BeliefTrajectory {
        // |P|_F = p with P = diag(p)
        let times: Vec<f64> = (0..=n).map(|i| tf * i as f64 / n as f64).collect();
        let beliefs = times
            .iter()
            .map(|_| GaussianBelief::new(StateVector::zeros(1), CovarianceMatrix::from_diagonal(&[p]).unwrap()).unwrap())
            .collect();
        BeliefTrajectory { times, beliefs }
    }

    #[test]
    fn zero_covariance_gives_zero_lhs() {
        let traj = constant_cov_traj(0.0, 2.0, 10);
        let ctrl = ControlTrajectory::constant(2.0, 10, ControlVector::from([3.0])).unwrap();
        let budget = ErrorBudget::new(1e-9, |r| r, |s| s.exp()).unwrap();
        assert_eq!(constraint_lhs(&budget, &ctrl, &traj).unwrap(), 0.0);
        assert!(check_membership(&budget, &ctrl, &traj).unwrap().inside);
        assert_eq!(bounded_control_bound(&traj, &ctrl, BoundConstant::Supplied(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_constants() {
        let (p, tf) = (0.7, 1.5);
        let traj = constant_cov_traj(p, tf, 30);
        let ctrl = ControlTrajectory::constant(tf, 30, ControlVector::from([1.0])).unwrap();
        let budget = ErrorBudget::new(1.0, |r| r, |s| s.exp()).unwrap();
        let lhs = constraint_lhs(&budget, &ctrl, &traj).unwrap();
        let expected = tf.exp() * p * tf;
        assert!((lhs - expected).abs() < 1e-12 * expected);
        assert!((bounded_control_bound(&traj, &ctrl, BoundConstant::Supplied(1.0)).unwrap() - p * tf).abs() < 1e-12);
    }

    #[test]
    fn membership_out_reports_value() {
        // e^tf p tf = 2 with tf = 1 -> p = 2/e
        let p = 2.0 / 1f64.exp();
        let traj = constant_cov_traj(p, 1.0, 8);
        let ctrl = ControlTrajectory::constant(1.0, 8, ControlVector::from([1.0])).unwrap();
        let budget = ErrorBudget::new(1.0, |r| r, |s| s.exp()).unwrap();
        let verdict = check_membership(&budget, &ctrl, &traj).unwrap();
        assert!(!verdict.inside);
        assert!((verdict.value - 2.0).abs() < 1e-12);
        let open = budget.unconstrained();
        assert!(check_membership(&open, &ctrl, &traj).unwrap().inside);
    }

    #[test]
    fn bound_matches_lhs_for_constant_phi() {
        let traj = constant_cov_traj(0.3, 2.0, 10);
        let ctrl = ControlTrajectory::constant(2.0, 10, ControlVector::from([5.0])).unwrap();
        let budget = ErrorBudget::exponential(1.0, |_| 0.8, 1.3).unwrap();
        let lhs = constraint_lhs(&budget, &ctrl, &traj).unwrap();
        let bound = bounded_control_bound(&traj, &ctrl, BoundConstant::Estimated(&budget)).unwrap();
        assert!((lhs - bound).abs() < 1e-12 * lhs);
    }

    #[test]
    fn budget_validation() {
        let good = ErrorBudget::exponential(1.0, |r| 2.0 * r, 1.0).unwrap();
        assert!(good.validate_on(&[0.0, 0.5, 1.0, 3.0]).is_ok());
        let bad = ErrorBudget::new(1.0, |r| -r, |s| s).unwrap();
        assert!(bad.validate_on(&[0.0, 1.0]).is_err());
        let decreasing = ErrorBudget::new(1.0, |r| 1.0 / (1.0 + r), |s| s).unwrap();
        assert!(decreasing.validate_on(&[0.0, 1.0]).is_err());
        assert!(ErrorBudget::new(0.0, |r| r, |s| s).is_err());
    }

    #[test]
    fn rescaled_control_shape() {
        let base = ControlTrajectory::constant(1.0, 4, ControlVector::from([2.0, 0.0])).unwrap();
        let c = rescaled_control(&base, 0.25, 1.0).unwrap();
        assert_eq!(c.n_intervals(), 5);
        assert_eq!(c.eval(0.1).unwrap()[0], 8.0);
        assert_eq!(c.eval(0.5).unwrap()[0], 0.0);
        assert!(rescaled_control(&base, 0.0, 1.0).is_err());
        assert!(rescaled_control(&base, 1.5, 1.0).is_err());
        let full = rescaled_control(&base, 1.0, 1.0).unwrap();
        assert_eq!(full.n_intervals(), 4);
    }

    #[test]
    fn lhs_monotone_in_covariance_scaling() {
        let ctrl = ControlTrajectory::constant(1.0, 10, ControlVector::from([1.0])).unwrap();
        let budget = ErrorBudget::new(1.0, |r| r, |s| s.exp()).unwrap();
        let a = constraint_lhs(&budget, &ctrl, &constant_cov_traj(0.2, 1.0, 10)).unwrap();
        let b = constraint_lhs(&budget, &ctrl, &constant_cov_traj(0.4, 1.0, 10)).unwrap();
        assert!(b >= a);
        let _ = DMatrix::<f64>::zeros(1, 1);
    }
}
