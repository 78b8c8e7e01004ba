//! Statistical linearization: RK4 integration of the coupled mean/covariance
//! system
//!
//! ```text
//! dm/dt = f(m, u)
//! dP/dt = A P + P A^T + g g^T,   A = D_x f(m, u)
//! ```
//!
//! and evaluation of the expected quadratic cost along the result.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{
    min_eigenvalue, repair_psd, symmetrize, trace_product, ControlTrajectory, CovarianceMatrix, DynamicsModel, GaussianBelief,
    QuadraticCost, StateVector, PSD_TOL,
};
use crate::error::{check_dim, Error, Result};

/// Mean/covariance trajectory on a strictly increasing time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefTrajectory {
    pub times: Vec<f64>,
    pub beliefs: Vec<GaussianBelief>,
}

impl BeliefTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn final_belief(&self) -> &GaussianBelief {
        self.beliefs.last().expect("non-empty trajectory")
    }

    pub fn state_dim(&self) -> usize {
        self.beliefs.first().map(|b| b.dim()).unwrap_or(0)
    }
}

/// Reusable RK4 workspace for the lifted system. Allocation-free per step.
pub struct LiftedRk4 {
    n: usize,
    m_stage: DVector<f64>,
    p_stage: DMatrix<f64>,
    km: [DVector<f64>; 4],
    kp: [DMatrix<f64>; 4],
    a: DMatrix<f64>,
    ap: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl LiftedRk4 {
    pub fn new(n: usize, d: usize) -> Self {
        let zv = || DVector::zeros(n);
        let zm = || DMatrix::zeros(n, n);
        Self {
            n,
            m_stage: zv(),
            p_stage: zm(),
            km: [zv(), zv(), zv(), zv()],
            kp: [zm(), zm(), zm(), zm()],
            a: zm(),
            ap: zm(),
            g: DMatrix::zeros(n, d),
        }
    }

    pub fn for_model<M: DynamicsModel + ?Sized>(model: &M) -> Self {
        Self::new(model.state_dim(), model.noise_dim())
    }

    fn derivative<M: DynamicsModel + ?Sized>(
        &mut self,
        model: &M,
        stage: usize,
        use_stage_buffers: bool,
        m: &DVector<f64>,
        p: &DMatrix<f64>,
        u: &DVector<f64>,
    ) -> Result<()> {
        let (ms, ps) = if use_stage_buffers {
            (&self.m_stage, &self.p_stage)
        } else {
            (m, p)
        };
        model.drift(ms, u, &mut self.km[stage])?;
        model.jacobian(ms, u, &mut self.a)?;
        model.dispersion(ms, u, &mut self.g)?;
        self.ap.gemm(1.0, &self.a, ps, 0.0);
        let kp = &mut self.kp[stage];
        let (n, d) = (self.n, self.g.ncols());
        for j in 0..n {
            for i in 0..n {
                let mut ggt = 0.0;
                for l in 0..d {
                    ggt += self.g[(i, l)] * self.g[(j, l)];
                }
                kp[(i, j)] = ggt + self.ap[(i, j)] + self.ap[(j, i)];
            }
        }
        Ok(())
    }

    /// Advances `(m, P)` by one classic RK4 step of size `h`. `u0`, `umid`,
    /// `u1` are the controls at the start, midpoint and end of the step.
    pub fn step<M: DynamicsModel + ?Sized>(
        &mut self,
        model: &M,
        m: &mut DVector<f64>,
        p: &mut DMatrix<f64>,
        h: f64,
        u0: &DVector<f64>,
        umid: &DVector<f64>,
        u1: &DVector<f64>,
    ) -> Result<()> {
        self.derivative(model, 0, false, m, p, u0)?;
        for (stage, (coef, u)) in [(0.5, umid), (0.5, umid), (1.0, u1)].into_iter().enumerate() {
            self.m_stage.copy_from(m);
            self.m_stage.axpy(coef * h, &self.km[stage], 1.0);
            self.p_stage.copy_from(p);
            self.p_stage.zip_apply(&self.kp[stage], |a, b| *a += coef * h * b);
            self.derivative(model, stage + 1, true, m, p, u)?;
        }
        let w = h / 6.0;
        for i in 0..self.n {
            m[i] += w * (self.km[0][i] + 2.0 * self.km[1][i] + 2.0 * self.km[2][i] + self.km[3][i]);
        }
        for j in 0..self.n {
            for i in 0..self.n {
                p[(i, j)] += w * (self.kp[0][(i, j)] + 2.0 * self.kp[1][(i, j)] + 2.0 * self.kp[2][(i, j)] + self.kp[3][(i, j)]);
            }
        }
        symmetrize(p);
        // Truncation error can push a nearly singular covariance just
        // outside the cone.
        repair_psd(p);
        Ok(())
    }
}

pub(crate) fn all_finite(m: &DVector<f64>, p: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite()) && p.iter().all(|v| v.is_finite())
}

/// Integrates the statistical linearization of `model` from `init` under
/// `ctrl`, with `steps_per_interval` RK4 steps per control interval.
pub fn propagate<M: DynamicsModel + ?Sized>(
    model: &M,
    init: &GaussianBelief,
    ctrl: &ControlTrajectory,
    steps_per_interval: usize,
) -> Result<BeliefTrajectory> {
    check_dim("initial belief", model.state_dim(), init.dim())?;
    check_dim("control", model.control_dim(), ctrl.control_dim())?;
    if steps_per_interval == 0 {
        return Err(Error::InvalidArgument("steps_per_interval must be >= 1".into()));
    }
    if !init.cov.is_psd() {
        return Err(Error::NotPsd {
            time: 0.0,
            min_eig: init.cov.min_eigenvalue(),
        });
    }
    let k = model.control_dim();
    let mut rk = LiftedRk4::for_model(model);
    let mut m = init.mean.0.clone();
    let mut p = init.cov.matrix().clone();
    let (mut u0, mut um, mut u1) = (DVector::zeros(k), DVector::zeros(k), DVector::zeros(k));

    let capacity = ctrl.n_intervals() * steps_per_interval + 1;
    let mut times = Vec::with_capacity(capacity);
    let mut beliefs = Vec::with_capacity(capacity);
    times.push(0.0);
    beliefs.push(init.clone());

    let nodes = ctrl.nodes();
    for i in 0..ctrl.n_intervals() {
        let (ta, tb) = (nodes[i], nodes[i + 1]);
        let h = (tb - ta) / steps_per_interval as f64;
        for s in 0..steps_per_interval {
            let t = ta + h * s as f64;
            ctrl.eval_in_interval_into(i, t, &mut u0);
            ctrl.eval_in_interval_into(i, t + 0.5 * h, &mut um);
            ctrl.eval_in_interval_into(i, t + h, &mut u1);
            let t_next = if s + 1 == steps_per_interval { tb } else { t + h };
            rk.step(model, &mut m, &mut p, h, &u0, &um, &u1).map_err(|e| match e {
                Error::ModelBreach(reason) | Error::NonFinite(reason) => Error::BlowUp { time: t, reason },
                other => other,
            })?;
            if !all_finite(&m, &p) {
                return Err(Error::BlowUp {
                    time: t_next,
                    reason: "non-finite mean or covariance".into(),
                });
            }
            let min_eig = min_eigenvalue(&p);
            if min_eig < -PSD_TOL * (1.0 + p.trace().abs()) {
                return Err(Error::NotPsd { time: t_next, min_eig });
            }
            times.push(t_next);
            beliefs.push(GaussianBelief {
                mean: StateVector(m.clone()),
                cov: CovarianceMatrix::new_unchecked(p.clone()),
            });
        }
    }
    Ok(BeliefTrajectory { times, beliefs })
}

/// Terms of the expected quadratic cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// `psi(m(tf))`.
    pub terminal_mean: f64,
    /// `tr(Q_f P(tf))`.
    pub terminal_cov: f64,
    /// `int L(m, u) dt` without the control weights.
    pub running_mean: f64,
    /// `int tr(Q(u) P) dt`.
    pub running_cov: f64,
    /// `int sum_j R_j u_j^2 dt`.
    pub control: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.terminal_mean + self.terminal_cov + self.running_mean + self.running_cov + self.control
    }
}

fn check_grids(traj: &BeliefTrajectory, ctrl: &ControlTrajectory) -> Result<()> {
    if traj.len() < 2 {
        return Err(Error::GridMismatch("belief trajectory has fewer than two points".into()));
    }
    let tf = ctrl.horizon();
    if (traj.horizon() - tf).abs() > 1e-9 * (1.0 + tf) || traj.times[0] != 0.0 {
        return Err(Error::GridMismatch(format!(
            "belief grid [{}, {}] vs control horizon [0, {}]",
            traj.times[0],
            traj.horizon(),
            tf
        )));
    }
    Ok(())
}

/// Breakdown of `psi(m(tf)) + tr(Q_f P(tf)) + int [L(m,u) + tr(Q(u) P)] dt`,
/// trapezoidal rule on the belief grid with the control sampled at each
/// segment midpoint.
pub fn expected_cost_breakdown(cost: &QuadraticCost, traj: &BeliefTrajectory, ctrl: &ControlTrajectory) -> Result<CostBreakdown> {
    check_dim("cost", cost.state_dim(), traj.state_dim())?;
    check_dim("control weights", cost.control_weights.len(), ctrl.control_dim())?;
    check_grids(traj, ctrl)?;
    let last = traj.final_belief();
    let mut out = CostBreakdown {
        terminal_mean: cost.terminal.eval(&last.mean),
        terminal_cov: trace_product(&cost.terminal_cov_weight(), last.cov.matrix()),
        ..Default::default()
    };
    let constant_q = (!cost.has_control_dependent_hessian()).then(|| cost.running_cov_weight(&DVector::zeros(ctrl.control_dim())));
    for j in 0..traj.len() - 1 {
        let (ta, tb) = (traj.times[j], traj.times[j + 1]);
        let dt = tb - ta;
        let u = ctrl.eval(0.5 * (ta + tb))?.0;
        let q = match &constant_q {
            Some(q) => q.clone(),
            None => cost.running_cov_weight(&u),
        };
        let (ba, bb) = (&traj.beliefs[j], &traj.beliefs[j + 1]);
        let mean_part = |m: &DVector<f64>| cost.running_value(m, &u) - cost.control_penalty(&u);
        out.running_mean += 0.5 * dt * (mean_part(&ba.mean) + mean_part(&bb.mean));
        out.running_cov += 0.5 * dt * (trace_product(&q, ba.cov.matrix()) + trace_product(&q, bb.cov.matrix()));
        out.control += dt * cost.control_penalty(&u);
    }
    Ok(out)
}

/// Expected quadratic cost of a propagated belief trajectory.
pub fn expected_quadratic_cost(cost: &QuadraticCost, traj: &BeliefTrajectory, ctrl: &ControlTrajectory) -> Result<f64> {
    Ok(expected_cost_breakdown(cost, traj, ctrl)?.total())
}

/// Pointwise `tr(Q P(t_i))`.
pub fn covariance_penalty_profile(traj: &BeliefTrajectory, q: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dim("penalty matrix", traj.state_dim(), q.nrows())?;
    check_dim("penalty matrix", traj.state_dim(), q.ncols())?;
    Ok(traj.beliefs.iter().map(|b| trace_product(q, b.cov.matrix())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlVector, FnModel, LinearModel};

    fn ou_run(steps: usize) -> BeliefTrajectory {
        let model = LinearModel::ornstein_uhlenbeck(2.0, 1.0);
        let init = GaussianBelief::new(StateVector::from([1.0]), CovarianceMatrix::zeros(1)).unwrap();
        let ctrl = ControlTrajectory::constant(1.0, steps, ControlVector::from([0.0])).unwrap();
        propagate(&model, &init, &ctrl, 1).unwrap()
    }

    #[test]
    fn ou_closed_form() {
        let traj = ou_run(1000);
        let last = traj.final_belief();
        let m_exact = (-2.0f64).exp();
        let p_exact = (1.0 - (-4.0f64).exp()) / 4.0;
        assert!((last.mean[0] - m_exact).abs() <= 1e-6 * m_exact);
        assert!((last.cov[(0, 0)] - p_exact).abs() <= 1e-6 * p_exact);
        assert_eq!(traj.len(), 1001);
    }

    #[test]
    fn constant_drift_keeps_covariance() {
        let model = FnModel::constant(DVector::from_column_slice(&[1.0, -2.0]), 1);
        let p0 = CovarianceMatrix::from_diagonal(&[0.5, 2.0]).unwrap();
        let init = GaussianBelief::new(StateVector::zeros(2), p0.clone()).unwrap();
        let ctrl = ControlTrajectory::constant(3.0, 10, ControlVector::from([0.0])).unwrap();
        let traj = propagate(&model, &init, &ctrl, 2).unwrap();
        for b in &traj.beliefs {
            assert_eq!(b.cov, p0);
        }
        assert!((traj.final_belief().mean[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn refined_grid_has_expected_times() {
        let model = LinearModel::ornstein_uhlenbeck(1.0, 1.0);
        let init = GaussianBelief::new(StateVector::from([0.0]), CovarianceMatrix::zeros(1)).unwrap();
        let ctrl = ControlTrajectory::constant(2.0, 4, ControlVector::from([0.0])).unwrap();
        let traj = propagate(&model, &init, &ctrl, 3).unwrap();
        assert_eq!(traj.len(), 13);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(traj.horizon(), 2.0);
    }

    #[test]
    fn zero_steps_rejected() {
        let model = LinearModel::ornstein_uhlenbeck(1.0, 1.0);
        let init = GaussianBelief::new(StateVector::from([0.0]), CovarianceMatrix::zeros(1)).unwrap();
        let ctrl = ControlTrajectory::constant(1.0, 4, ControlVector::from([0.0])).unwrap();
        assert!(propagate(&model, &init, &ctrl, 0).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let model = FnModel::new(1, 1, |x, _u| DVector::from_element(1, x[0] * x[0]));
        let init = GaussianBelief::new(StateVector::from([1.0]), CovarianceMatrix::zeros(1)).unwrap();
        let ctrl = ControlTrajectory::constant(5.0, 50, ControlVector::from([0.0])).unwrap();
        assert!(matches!(propagate(&model, &init, &ctrl, 1), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn trace_of_final_covariance() {
        let traj = BeliefTrajectory {
            times: vec![0.0, 1.0],
            beliefs: vec![
                GaussianBelief::new(StateVector::zeros(2), CovarianceMatrix::zeros(2)).unwrap(),
                GaussianBelief::new(StateVector::zeros(2), CovarianceMatrix::from_diagonal(&[1.0, 2.0]).unwrap()).unwrap(),
            ],
        };
        let ctrl = ControlTrajectory::constant(1.0, 1, ControlVector::from([0.0])).unwrap();
        let mut cost = QuadraticCost::zero(2, 1);
        cost.cov_terminal = DMatrix::identity(2, 2);
        assert_eq!(expected_quadratic_cost(&cost, &traj, &ctrl).unwrap(), 3.0);
    }

    #[test]
    fn zero_covariance_gives_deterministic_cost() {
        // f = 1, m(0) = 0 -> m(t) = t; psi = m^2, L = m -> 1 + 1/2
        let model = FnModel::constant(DVector::from_element(1, 1.0), 1);
        let init = GaussianBelief::new(StateVector::zeros(1), CovarianceMatrix::zeros(1)).unwrap();
        let ctrl = ControlTrajectory::constant(1.0, 20, ControlVector::from([0.0])).unwrap();
        let traj = propagate(&model, &init, &ctrl, 1).unwrap();
        let mut cost = QuadraticCost::zero(1, 1);
        cost.terminal.hessian[(0, 0)] = 1.0;
        cost.running.linear[0] = 1.0;
        cost.cov_running[(0, 0)] = 5.0;
        let v = expected_quadratic_cost(&cost, &traj, &ctrl).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_detected() {
        let traj = ou_run(10);
        let ctrl = ControlTrajectory::constant(2.0, 10, ControlVector::from([0.0])).unwrap();
        let cost = QuadraticCost::zero(1, 1);
        assert!(matches!(expected_quadratic_cost(&cost, &traj, &ctrl), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn penalty_profile_values() {
        let traj = ou_run(1000);
        let zero = covariance_penalty_profile(&traj, &DMatrix::zeros(1, 1)).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let one = covariance_penalty_profile(&traj, &DMatrix::identity(1, 1)).unwrap();
        assert!((one.last().unwrap() - (1.0 - (-4.0f64).exp()) / 4.0).abs() < 1e-6);
        assert!(covariance_penalty_profile(&traj, &DMatrix::identity(2, 2)).is_err());
    }
}
