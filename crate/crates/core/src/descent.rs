//! Planar powered-descent landing: state `(y, z, v_y, v_z, mu)`, thrust
//! direction control, partial state feedback and smooth norm saturation.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::dynamics::{ControlVector, CovarianceMatrix, DynamicsModel, GaussianBelief, QuadraticCost, QuadraticForm, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::accessibility::{latin_hypercube, ScaledModel};
use crate::ocp::{solve, transcribe, BoundSide, ChanceConstraintSpec, Horizon, RobustOcp, SolveOptions, SolveReport, TerminalTarget, TranscribedNlp};

pub const STATE_DIM: usize = 5;
/// Dimension of `nu = (rho, theta, K_n, K_d)`.
pub const FEEDBACK_DIM: usize = 10;
/// Paths whose mass drops to this value are aborted.
pub const MASS_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DispersionMode {
    /// `g = sigma / mu0`, fixed along the trajectory.
    #[default]
    Constant,
    /// `g = sigma / mu(t)`.
    MassScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RocketParams {
    /// Maximal thrust `T` in N.
    pub thrust: f64,
    /// Mass flow `q` in kg/s at full thrust.
    pub mass_flow: f64,
    pub g0: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Force noise intensities `(sigma_y, sigma_z)` in N.
    pub sigma: [f64; 2],
    pub dispersion_mode: DispersionMode,
    /// Mass used to turn the force noise into acceleration noise in
    /// `constant` mode.
    pub reference_mass: f64,
}

impl Default for RocketParams {
    fn default() -> Self {
        Self {
            thrust: 1e6,
            mass_flow: 300.0,
            g0: 9.81,
            u_min: 0.2,
            u_max: 0.8,
            sigma: [100.0, 10.0],
            dispersion_mode: DispersionMode::Constant,
            reference_mass: 40000.0,
        }
    }
}

impl RocketParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("thrust", self.thrust),
            ("mass_flow", self.mass_flow),
            ("g0", self.g0),
            ("reference_mass", self.reference_mass),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0 <= self.u_min && self.u_min <= self.u_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= u_min <= u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("sigma entries must be nonnegative".into()));
        }
        Ok(())
    }

    fn noise_scale(&self, mu: f64) -> f64 {
        match self.dispersion_mode {
            DispersionMode::Constant => 1.0 / self.reference_mass,
            DispersionMode::MassScaled => 1.0 / mu,
        }
    }

    fn write_dispersion(&self, mu: f64, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        let s = self.noise_scale(mu);
        out[(2, 0)] = self.sigma[0] * s;
        out[(3, 0)] = self.sigma[1] * s;
    }
}

/// `nu = (rho, theta, K_n, K_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FeedbackParams {
    pub rho: f64,
    pub theta: f64,
    pub k_n: [f64; 4],
    pub k_d: [f64; 4],
}

impl FeedbackParams {
    pub fn open_loop(rho: f64, theta: f64) -> Self {
        Self {
            rho,
            theta,
            ..Default::default()
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        check_dim("feedback parameters", FEEDBACK_DIM, v.len())?;
        let mut out = Self::open_loop(v[0], v[1]);
        out.k_n.copy_from_slice(&v[2..6]);
        out.k_d.copy_from_slice(&v[6..10]);
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("feedback parameters".into()));
        }
        Ok(out)
    }

    pub fn to_control(&self) -> ControlVector {
        let mut v = Vec::with_capacity(FEEDBACK_DIM);
        v.push(self.rho);
        v.push(self.theta);
        v.extend_from_slice(&self.k_n);
        v.extend_from_slice(&self.k_d);
        ControlVector::from(v)
    }

    /// `(rho + K_n xbar, theta + K_d xbar)`.
    pub fn polar(&self, xbar: &[f64]) -> (f64, f64) {
        let mut s = self.rho;
        let mut phi = self.theta;
        for j in 0..4 {
            s += self.k_n[j] * xbar[j];
            phi += self.k_d[j] * xbar[j];
        }
        (s, phi)
    }
}

/// Unperturbed drift `(v_y, v_z, T u_y/mu, T u_z/mu - g0, -q |u|)`.
pub fn descent_drift(params: &RocketParams, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
    check_dim("descent state", STATE_DIM, x.dim())?;
    check_dim("descent control", 2, u.dim())?;
    if !(x[4] > 0.0) {
        return Err(Error::ModelBreach(format!("non-positive mass {}", x[4])));
    }
    let mut out = DVector::zeros(STATE_DIM);
    write_drift(params, x, u[0], u[1], u[0].hypot(u[1]), &mut out);
    Ok(StateVector(out))
}

fn write_drift(params: &RocketParams, x: &DVector<f64>, uy: f64, uz: f64, norm: f64, out: &mut DVector<f64>) {
    let mu = x[4];
    out[0] = x[2];
    out[1] = x[3];
    out[2] = params.thrust * uy / mu;
    out[3] = params.thrust * uz / mu - params.g0;
    out[4] = -params.mass_flow * norm;
}

/// `u_FB = (rho + K_n xbar) (cos(theta + K_d xbar), sin(theta + K_d xbar))`.
pub fn feedback_law(nu: &FeedbackParams, xbar: &[f64]) -> Result<ControlVector> {
    check_dim("feedback state", 4, xbar.len())?;
    let (s, phi) = nu.polar(xbar);
    Ok(ControlVector::from([s * phi.cos(), s * phi.sin()]))
}

/// `(b+a)/2 + (sqrt((s-a)^2 + eps^2) - sqrt((s-b)^2 + eps^2))/2`; `eps = 0`
/// is the exact clamp to `[a, b]`.
pub fn smooth_sat(s: f64, a: f64, b: f64, eps: f64) -> Result<f64> {
    if !(a < b) {
        return Err(Error::InvalidArgument(format!("saturation band [{a}, {b}] is empty")));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument("saturation smoothing must be nonnegative".into()));
    }
    Ok(sat_value(s, a, b, eps))
}

fn sat_value(s: f64, a: f64, b: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        return s.clamp(a, b);
    }
    0.5 * (a + b) + 0.5 * ((s - a).hypot(eps) - (s - b).hypot(eps))
}

fn sat_slope(s: f64, a: f64, b: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        return if s > a && s < b { 1.0 } else { 0.0 };
    }
    0.5 * ((s - a) / (s - a).hypot(eps) - (s - b) / (s - b).hypot(eps))
}

/// How the decision control enters the descent dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ControlMode {
    /// `u = (u_y, u_z)`.
    Cartesian,
    /// `u = u_rho (cos u_theta, sin u_theta)`.
    Polar,
    /// `u = u_FB(x, nu)`, decision `nu`.
    Feedback,
    /// Feedback with the norm channel passed through `smooth_sat` on
    /// `[u_min, u_max]`.
    SaturatedFeedback { eps: f64 },
}

/// Descent dynamics as an Itô system with one Wiener channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentModel {
    pub params: RocketParams,
    pub mode: ControlMode,
}

/// Physical thrust vector and the partial derivatives needed by the
/// Jacobian.
struct Thrust {
    uy: f64,
    uz: f64,
    norm: f64,
    /// `d u_y / d xbar_j`, `d u_z / d xbar_j`, `d |u| / d xbar_j`.
    duy: [f64; 4],
    duz: [f64; 4],
    dnorm: [f64; 4],
}

impl DescentModel {
    pub fn new(params: RocketParams, mode: ControlMode) -> Result<Self> {
        params.validate()?;
        if let ControlMode::SaturatedFeedback { eps } = mode {
            if !(eps >= 0.0) {
                return Err(Error::InvalidArgument("saturation smoothing must be nonnegative".into()));
            }
            if !(params.u_min < params.u_max) {
                return Err(Error::InvalidArgument("saturation needs u_min < u_max".into()));
            }
        }
        Ok(Self { params, mode })
    }

    /// Same parameters with a different control mode.
    pub fn with_mode(&self, mode: ControlMode) -> Result<Self> {
        Self::new(self.params.clone(), mode)
    }

    fn thrust(&self, x: &DVector<f64>, u: &DVector<f64>) -> Thrust {
        let zero = [0.0; 4];
        match self.mode {
            ControlMode::Cartesian => Thrust {
                uy: u[0],
                uz: u[1],
                norm: u[0].hypot(u[1]),
                duy: zero,
                duz: zero,
                dnorm: zero,
            },
            ControlMode::Polar => Thrust {
                uy: u[0] * u[1].cos(),
                uz: u[0] * u[1].sin(),
                norm: u[0].abs(),
                duy: zero,
                duz: zero,
                dnorm: zero,
            },
            ControlMode::Feedback | ControlMode::SaturatedFeedback { .. } => {
                let (mut s, mut phi) = (u[0], u[1]);
                for j in 0..4 {
                    s += u[2 + j] * x[j];
                    phi += u[6 + j] * x[j];
                }
                let (r, dr) = match self.mode {
                    ControlMode::SaturatedFeedback { eps } => {
                        let (a, b) = (self.params.u_min, self.params.u_max);
                        (sat_value(s, a, b, eps), sat_slope(s, a, b, eps))
                    }
                    _ => (s, 1.0),
                };
                let (sin, cos) = phi.sin_cos();
                let mut t = Thrust {
                    uy: r * cos,
                    uz: r * sin,
                    norm: r.abs(),
                    duy: zero,
                    duz: zero,
                    dnorm: zero,
                };
                let sign = if r < 0.0 { -1.0 } else { 1.0 };
                for j in 0..4 {
                    let ds = dr * u[2 + j];
                    let dphi = u[6 + j];
                    t.duy[j] = ds * cos - r * sin * dphi;
                    t.duz[j] = ds * sin + r * cos * dphi;
                    t.dnorm[j] = sign * ds;
                }
                t
            }
        }
    }

    /// Physical thrust `(u_y, u_z)` produced by the decision `u` at `x`.
    pub fn physical_control(&self, x: &StateVector, u: &ControlVector) -> Result<ControlVector> {
        check_dim("descent state", STATE_DIM, x.dim())?;
        check_dim("descent control", self.control_dim(), u.dim())?;
        let t = self.thrust(x, u);
        Ok(ControlVector::from([t.uy, t.uz]))
    }

    /// Thrust norm before saturation: `|rho + K_n xbar|` for the feedback
    /// modes, `|u|` otherwise.
    pub fn commanded_norm(&self, x: &[f64], u: &[f64]) -> f64 {
        match self.mode {
            ControlMode::Cartesian => u[0].hypot(u[1]),
            ControlMode::Polar => u[0].abs(),
            ControlMode::Feedback | ControlMode::SaturatedFeedback { .. } => {
                let mut s = u[0];
                for j in 0..4 {
                    s += u[2 + j] * x[j];
                }
                s.abs()
            }
        }
    }
}

impl DynamicsModel for DescentModel {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn control_dim(&self) -> usize {
        match self.mode {
            ControlMode::Cartesian | ControlMode::Polar => 2,
            ControlMode::Feedback | ControlMode::SaturatedFeedback { .. } => FEEDBACK_DIM,
        }
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        if !(x[4] > MASS_FLOOR) {
            return Err(Error::ModelBreach(format!("mass {} below the {MASS_FLOOR} kg floor", x[4])));
        }
        let t = self.thrust(x, u);
        write_drift(&self.params, x, t.uy, t.uz, t.norm, out);
        Ok(())
    }

    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        let mu = x[4];
        if !(mu > MASS_FLOOR) {
            return Err(Error::ModelBreach(format!("mass {mu} below the {MASS_FLOOR} kg floor")));
        }
        let t = self.thrust(x, u);
        let tm = self.params.thrust / mu;
        out.fill(0.0);
        out[(0, 2)] = 1.0;
        out[(1, 3)] = 1.0;
        for j in 0..4 {
            out[(2, j)] = tm * t.duy[j];
            out[(3, j)] = tm * t.duz[j];
            out[(4, j)] = -self.params.mass_flow * t.dnorm[j];
        }
        out[(2, 4)] = -tm * t.uy / mu;
        out[(3, 4)] = -tm * t.uz / mu;
        Ok(())
    }

    fn dispersion(&self, x: &DVector<f64>, _u: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        self.params.write_dispersion(x[4], out);
        Ok(())
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// `f_sat_FB(x, nu)` with the given smoothing.
pub fn saturated_feedback_drift(params: &RocketParams, nu: &FeedbackParams, x: &StateVector, eps: f64) -> Result<StateVector> {
    check_dim("descent state", STATE_DIM, x.dim())?;
    if !(x[4] > 0.0) {
        return Err(Error::ModelBreach(format!("non-positive mass {}", x[4])));
    }
    let (s, phi) = nu.polar(&x.as_slice()[..4]);
    let r = smooth_sat(s, params.u_min, params.u_max, eps)?;
    let mut out = DVector::zeros(STATE_DIM);
    write_drift(params, x, r * phi.cos(), r * phi.sin(), r.abs(), &mut out);
    Ok(StateVector(out))
}

/// Initial belief and penalty weights of a landing scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub rocket: RocketParams,
    pub initial_position: [f64; 2],
    pub initial_velocity: [f64; 2],
    pub initial_mass: f64,
    /// Diagonal of the initial covariance.
    pub initial_cov_diag: [f64; 5],
    /// Running covariance weight `Q` (diagonal).
    pub q_diag: [f64; 5],
    /// Terminal covariance weight `Q_f` (diagonal).
    pub qf_diag: [f64; 5],
    /// Smoothing of the saturated model.
    pub saturation_eps: f64,
    /// Probability level of the chance constraints.
    pub chance_level: f64,
    /// Regularization weights on `K_n` and `K_d`.
    pub gain_weights: [f64; 2],
    /// Free final time bounds in s.
    pub tf_bounds: [f64; 2],
    pub tf_guess: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rocket: RocketParams::default(),
            initial_position: [1000.0, 4000.0],
            initial_velocity: [-75.0, -200.0],
            initial_mass: 40000.0,
            initial_cov_diag: [100.0, 100.0, 1.0, 1.0, 1600.0],
            q_diag: [10e3, 50e3, 1e3, 10e3, 0.0],
            qf_diag: [14e3, 20e3, 0.2e3, 4e3, 0.0],
            saturation_eps: 0.02,
            chance_level: 0.99,
            gain_weights: [2.0, 1.0],
            tf_bounds: [10.0, 60.0],
            tf_guess: 30.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.rocket.validate()?;
        if !(self.initial_mass > MASS_FLOOR) {
            return Err(Error::InvalidArgument("initial mass must exceed the mass floor".into()));
        }
        for (name, d) in [("initial_cov_diag", &self.initial_cov_diag), ("q_diag", &self.q_diag), ("qf_diag", &self.qf_diag)] {
            if d.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("{name} entries must be nonnegative")));
            }
        }
        if !(self.saturation_eps >= 0.0) {
            return Err(Error::InvalidArgument("saturation_eps must be nonnegative".into()));
        }
        if !(self.chance_level > 0.5 && self.chance_level < 1.0) {
            return Err(Error::InvalidArgument("chance_level must lie in (0.5, 1)".into()));
        }
        if self.gain_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("gain_weights must be nonnegative".into()));
        }
        let [lo, hi] = self.tf_bounds;
        if !(lo > 0.0 && lo < hi && (lo..=hi).contains(&self.tf_guess)) {
            return Err(Error::InvalidArgument("need 0 < tf_min < tf_max and tf_guess inside".into()));
        }
        Ok(())
    }

    pub fn initial_belief(&self) -> Result<GaussianBelief> {
        let [y, z] = self.initial_position;
        let [vy, vz] = self.initial_velocity;
        GaussianBelief::new(
            StateVector::from([y, z, vy, vz, self.initial_mass]),
            CovarianceMatrix::from_diagonal(&self.initial_cov_diag)?,
        )
    }

    pub fn model(&self, mode: ControlMode) -> Result<DescentModel> {
        DescentModel::new(self.rocket.clone(), mode)
    }

    /// Thrust direction opposing the initial velocity and gravity, used to
    /// seed the solver.
    pub fn initial_heading(&self) -> f64 {
        let [vy, vz] = self.initial_velocity;
        let (ay, az) = (-vy, -vz + self.rocket.g0 * self.tf_guess);
        if ay == 0.0 && az == 0.0 {
            FRAC_PI_2
        } else {
            az.atan2(ay)
        }
    }
}

// ---------------------------------------------------------------------------
// Problems

/// Box on the scaled feedback gains.
pub const GAIN_BOX: f64 = 20.0;
const STATE_SCALE: [f64; 5] = [1e3, 1e3, 1e2, 1e2, 4e4];
const TIME_SCALE: f64 = 30.0;
const THETA_BOX: (f64, f64) = (0.0, std::f64::consts::PI);

/// `-mu(tf) + tr(Q_f P(tf)) + int tr(Q P) dt`, plus the gain penalty
/// `w_n |K_n|^2 + w_d |K_d|^2` for the feedback parametrization.
pub fn descent_cost(cfg: &ScenarioConfig, feedback: bool) -> QuadraticCost {
    let k = if feedback { FEEDBACK_DIM } else { 2 };
    let mut cost = QuadraticCost::zero(STATE_DIM, k);
    let mut b = DVector::zeros(STATE_DIM);
    b[4] = -1.0;
    cost.terminal = QuadraticForm::linear(b);
    cost.cov_terminal = DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.qf_diag));
    cost.cov_running = DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.q_diag));
    if feedback {
        for j in 0..4 {
            cost.control_weights[2 + j] = cfg.gain_weights[0];
            cost.control_weights[6 + j] = cfg.gain_weights[1];
        }
    }
    cost
}

fn base_problem(cfg: &ScenarioConfig, mode: ControlMode) -> Result<RobustOcp> {
    cfg.validate()?;
    let feedback = !matches!(mode, ControlMode::Cartesian | ControlMode::Polar);
    let model = Arc::new(cfg.model(mode)?);
    let horizon = Horizon::Free {
        min: cfg.tf_bounds[0],
        max: cfg.tf_bounds[1],
        guess: cfg.tf_guess,
    };
    let mut ocp = RobustOcp::new(model, descent_cost(cfg, feedback), cfg.initial_belief()?, horizon);
    ocp.target = Some(TerminalTarget::components(STATE_DIM, &[0, 1, 2, 3], &[0.0; 4])?);
    ocp.state_scale = DVector::from_column_slice(&STATE_SCALE);
    ocp.time_scale = TIME_SCALE;
    let rho0 = 0.5 * (cfg.rocket.u_min + cfg.rocket.u_max);
    let theta0 = cfg.initial_heading();
    if feedback {
        let mut scale = vec![1.0; FEEDBACK_DIM];
        let mut bounds = vec![(0.0, 2.0 * cfg.rocket.u_max), THETA_BOX];
        for block in 0..2 {
            for j in 0..4 {
                scale[2 + 4 * block + j] = 1.0 / STATE_SCALE[j];
                let g = GAIN_BOX / STATE_SCALE[j];
                bounds.push((-g, g));
            }
        }
        ocp.control_scale = DVector::from_vec(scale);
        ocp.control_box = bounds;
        ocp.initial_control = FeedbackParams::open_loop(rho0, theta0).to_control();
    } else {
        ocp.control_box = vec![(cfg.rocket.u_min, cfg.rocket.u_max), THETA_BOX];
        ocp.initial_control = ControlVector::from([rho0, theta0]);
    }
    Ok(ocp)
}

/// Open-loop problem: polar control `(u_rho, u_theta)` with
/// `u_min <= u_rho <= u_max`.
pub fn build_problem4(cfg: &ScenarioConfig) -> Result<RobustOcp> {
    base_problem(cfg, ControlMode::Polar)
}

/// Partial feedback through the smoothly saturated dynamics.
pub fn build_problem5(cfg: &ScenarioConfig) -> Result<RobustOcp> {
    base_problem(cfg, ControlMode::SaturatedFeedback { eps: cfg.saturation_eps })
}

/// Partial feedback with chance constraints
/// `u_min <= rho + K_n xbar <= u_max` holding with probability `p`.
pub fn build_problem6(cfg: &ScenarioConfig) -> Result<RobustOcp> {
    let mut ocp = base_problem(cfg, ControlMode::Feedback)?;
    ocp.chance_constraints = norm_chance_rows(cfg)?;
    Ok(ocp)
}

/// Feedback decisions `(rho, theta, 0, 0)` reproducing an open-loop polar
/// schedule, as a warm start for the feedback problems.
pub fn feedback_warm_start(polar: &[Vec<f64>]) -> Vec<ControlVector> {
    polar.iter().map(|u| FeedbackParams::open_loop(u[0], u[1]).to_control()).collect()
}

/// Which landing problem to pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Open loop with `u_min <= |u| <= u_max`.
    Problem4,
    /// Partial feedback through the smoothed saturation.
    Problem5,
    /// Partial feedback with chance constraints on the thrust norm.
    Problem6,
    /// Any control parametrization, chance rows optional.
    Custom { control: ControlMode, chance_constraints: bool },
}

impl Scenario {
    pub fn control_mode(&self, cfg: &ScenarioConfig) -> ControlMode {
        match self {
            Scenario::Problem4 => ControlMode::Polar,
            Scenario::Problem5 => ControlMode::SaturatedFeedback { eps: cfg.saturation_eps },
            Scenario::Problem6 => ControlMode::Feedback,
            Scenario::Custom { control, .. } => *control,
        }
    }

    pub fn build(&self, cfg: &ScenarioConfig) -> Result<RobustOcp> {
        match self {
            Scenario::Problem4 => build_problem4(cfg),
            Scenario::Problem5 => build_problem5(cfg),
            Scenario::Problem6 => build_problem6(cfg),
            Scenario::Custom { control, chance_constraints } => {
                let mut ocp = base_problem(cfg, *control)?;
                if *chance_constraints {
                    if !matches!(control, ControlMode::Feedback | ControlMode::SaturatedFeedback { .. }) {
                        return Err(Error::InvalidArgument("chance constraints need a feedback parametrization".into()));
                    }
                    ocp.chance_constraints = norm_chance_rows(cfg)?;
                }
                Ok(ocp)
            }
        }
    }

    /// Model for Monte Carlo runs: feedback laws go through the exact clamp
    /// on `[u_min, u_max]`, whatever the planning model used.
    pub fn simulation_model(&self, cfg: &ScenarioConfig) -> Result<DescentModel> {
        match self.control_mode(cfg) {
            ControlMode::Feedback | ControlMode::SaturatedFeedback { .. } => cfg.model(ControlMode::SaturatedFeedback { eps: 0.0 }),
            other => cfg.model(other),
        }
    }
}

/// Solved scenario together with the solve it was continued from, if any.
#[derive(Debug)]
pub struct ScenarioSolve {
    pub nlp: TranscribedNlp,
    pub report: SolveReport,
    pub seed: Option<SolveReport>,
}

/// Transcribes and solves `scenario` on `nodes` intervals.
///
/// With `continuation`, Problem 5 starts from the Problem 6 optimum: the
/// chance-constrained solution keeps the commanded norm inside the band, the
/// saturated problem relaxes it, and the cold start stalls on the plateau
/// where the commanded norm sits deep in saturation and the norm feedback has
/// no effect.
pub fn solve_scenario(
    cfg: &ScenarioConfig,
    scenario: Scenario,
    nodes: usize,
    steps_per_interval: usize,
    opts: &SolveOptions,
    continuation: bool,
) -> Result<ScenarioSolve> {
    let transcribe_for = |s: Scenario| -> Result<TranscribedNlp> {
        let mut ocp = s.build(cfg)?;
        ocp.steps_per_interval = steps_per_interval;
        transcribe(ocp, nodes)
    };
    let nlp = transcribe_for(scenario)?;
    let mut seed = None;
    let mut opts = opts.clone();
    if continuation && scenario == Scenario::Problem5 && opts.initial.is_none() {
        let prev = solve(&transcribe_for(Scenario::Problem6)?, &opts)?;
        log::info!("continuation start: Problem 6 solved to t_f = {:.3} s ({:?})", prev.tf, prev.status);
        opts.initial = Some(prev.decision_vector());
        seed = Some(prev);
    }
    let report = solve(&nlp, &opts)?;
    Ok(ScenarioSolve { nlp, report, seed })
}

fn norm_chance_rows(cfg: &ScenarioConfig) -> Result<Vec<ChanceConstraintSpec>> {
    let gains: Vec<usize> = (2..6).collect();
    let states: Vec<usize> = (0..4).collect();
    Ok(vec![
        ChanceConstraintSpec::new(0, gains.clone(), states.clone(), cfg.rocket.u_max, BoundSide::Upper, cfg.chance_level)?,
        ChanceConstraintSpec::new(0, gains, states, cfg.rocket.u_min, BoundSide::Lower, cfg.chance_level)?,
    ])
}

// ---------------------------------------------------------------------------
// Rank tests

/// Nondimensional coordinates for the rank tests (the solver's state scale).
pub fn rank_model(params: &RocketParams, mode: ControlMode) -> Result<ScaledModel<DescentModel>> {
    ScaledModel::new(DescentModel::new(params.clone(), mode)?, &STATE_SCALE)
}

/// `(0,0)`, `(0,1)`, `(1,0)` and `(1/√2, 1/√2)`: enough open-loop thrusts
/// for the plain accessibility check.
pub fn reference_rank_controls() -> Vec<ControlVector> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        ControlVector::from([0.0, 0.0]),
        ControlVector::from([0.0, 1.0]),
        ControlVector::from([1.0, 0.0]),
        ControlVector::from([s, s]),
    ]
}

/// Latin-hypercube feedback parameters in the unit box, gains expressed
/// per nondimensional state unit.
pub fn feedback_rank_samples<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Vec<ControlVector>> {
    let raw = latin_hypercube(rng, n, &[0.0; FEEDBACK_DIM], &[1.0; FEEDBACK_DIM])?;
    Ok(raw
        .into_iter()
        .map(|mut v| {
            for j in 0..4 {
                v[2 + j] /= STATE_SCALE[j];
                v[6 + j] /= STATE_SCALE[j];
            }
            ControlVector::from(v)
        })
        .collect())
}

/// Random nondimensional state with positive mass.
pub fn random_rank_point<R: Rng + ?Sized>(rng: &mut R) -> StateVector {
    StateVector::from([
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(0.25..1.0),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormLevel {
    Min,
    Interior,
    Max,
}

/// Shape of a thrust-norm schedule on the node grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormProfile {
    /// Runs of bound labels with interior nodes dropped, e.g. `[Min, Max]`.
    pub bound_runs: Vec<NormLevel>,
    pub interior_nodes: usize,
    pub pattern: String,
}

impl NormProfile {
    /// At most one switch between the bounds, starting at `Min`.
    pub fn is_min_max(&self) -> bool {
        self.bound_runs == [NormLevel::Min, NormLevel::Max]
    }

    pub fn switches(&self) -> usize {
        self.bound_runs.len().saturating_sub(1)
    }
}

/// Labels each node as on the lower bound, upper bound or interior (within
/// `tol`), then compresses the bound labels into runs.
pub fn classify_norm_profile(norms: &[f64], u_min: f64, u_max: f64, tol: f64) -> NormProfile {
    let mut runs: Vec<NormLevel> = Vec::new();
    let mut interior = 0;
    for &r in norms {
        let level = if r <= u_min + tol {
            NormLevel::Min
        } else if r >= u_max - tol {
            NormLevel::Max
        } else {
            NormLevel::Interior
        };
        if level == NormLevel::Interior {
            interior += 1;
            continue;
        }
        if runs.last() != Some(&level) {
            runs.push(level);
        }
    }
    let pattern = runs
        .iter()
        .map(|l| match l {
            NormLevel::Min => "Min",
            NormLevel::Max => "Max",
            NormLevel::Interior => "Mid",
        })
        .collect::<Vec<_>>()
        .join("-");
    NormProfile {
        bound_runs: runs,
        interior_nodes: interior,
        pattern,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{eval_jacobian_fd, eval_jacobian};

    fn params() -> RocketParams {
        RocketParams::default()
    }

    #[test]
    fn drift_examples() {
        let p = params();
        let x = StateVector::from([0.0, 0.0, 0.0, 0.0, 40000.0]);
        let f = descent_drift(&p, &x, &ControlVector::from([0.0, 0.8])).unwrap();
        assert!((f[3] - (20.0 - 9.81)).abs() < 1e-12);
        assert_eq!(f[4], -240.0);
        let free = descent_drift(&p, &x, &ControlVector::from([0.0, 0.0])).unwrap();
        assert_eq!(free.as_slice(), &[0.0, 0.0, 0.0, -9.81, 0.0]);
        let f = descent_drift(&p, &x, &ControlVector::from([0.3, 0.4])).unwrap();
        assert!((f[4] + 150.0).abs() < 1e-12);
        let dead = StateVector::from([0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(descent_drift(&p, &dead, &ControlVector::from([0.0, 0.0])), Err(Error::ModelBreach(_))));
    }

    #[test]
    fn feedback_examples() {
        let nu = FeedbackParams::open_loop(0.5, 0.3);
        let u = feedback_law(&nu, &[10.0, -3.0, 2.0, 1.0]).unwrap();
        assert!((u[0] - 0.5 * 0.3f64.cos()).abs() < 1e-15);
        let nu = FeedbackParams {
            rho: 1.0,
            theta: 0.0,
            k_n: [0.0; 4],
            k_d: [FRAC_PI_2, 0.0, 0.0, 0.0],
        };
        let u = feedback_law(&nu, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(u[0].abs() < 1e-15 && (u[1] - 1.0).abs() < 1e-15);
        let nu = FeedbackParams::from_slice(&[0.4, 1.0, 0.01, 0.02, -0.1, 0.3, 0.5, 0.2, 0.1, -0.7]).unwrap();
        let xbar = [3.0, -2.0, 1.5, 0.5];
        let u = feedback_law(&nu, &xbar).unwrap();
        let (s, _) = nu.polar(&xbar);
        assert!((u.norm() - s.abs()).abs() < 1e-14);
        assert_eq!(FeedbackParams::from_slice(nu.to_control().as_slice()).unwrap(), nu);
    }

    #[test]
    fn sat_examples() {
        assert_eq!(smooth_sat(0.5, 0.2, 0.8, 0.0).unwrap(), 0.5);
        assert_eq!(smooth_sat(-1.0, 0.2, 0.8, 0.0).unwrap(), 0.2);
        assert_eq!(smooth_sat(2.0, 0.2, 0.8, 0.0).unwrap(), 0.8);
        assert!((smooth_sat(0.5, 0.2, 0.8, 0.02).unwrap() - 0.5).abs() < 1e-15);
        let expected = 0.5 + ((0.36f64 + 0.0004).sqrt() - 0.02) / 2.0;
        assert!((smooth_sat(0.8, 0.2, 0.8, 0.02).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.790167).abs() < 1e-6);
        assert!(smooth_sat(0.5, 0.8, 0.2, 0.0).is_err());
    }

    #[test]
    fn saturated_drift_matches_open_loop_inside_band() {
        let p = params();
        let x = StateVector::from([100.0, 2000.0, -10.0, -50.0, 35000.0]);
        let nu = FeedbackParams::open_loop(0.5, 1.2);
        let sat = saturated_feedback_drift(&p, &nu, &x, 0.0).unwrap();
        let u = feedback_law(&nu, &x.as_slice()[..4]).unwrap();
        let plain = descent_drift(&p, &x, &u).unwrap();
        assert!((&sat.0 - &plain.0).norm() < 1e-12);
        let hot = saturated_feedback_drift(&p, &FeedbackParams::open_loop(2.0, 1.2), &x, 0.0).unwrap();
        assert!((hot[4] + p.mass_flow * p.u_max).abs() < 1e-12);
    }

    #[test]
    fn analytic_jacobians_match_fd() {
        let x = StateVector::from([120.0, 1500.0, -20.0, -60.0, 36000.0]);
        let nu = ControlVector::from(vec![0.5, 1.3, 1e-4, -2e-4, 3e-3, 1e-3, 2e-4, -1e-4, 1e-3, -2e-3]);
        for mode in [
            ControlMode::Feedback,
            ControlMode::SaturatedFeedback { eps: 0.02 },
        ] {
            let m = DescentModel::new(params(), mode).unwrap();
            let a = eval_jacobian(&m, &x, &nu).unwrap();
            let b = eval_jacobian_fd(&m, &x, &nu).unwrap();
            assert!((&a - &b).norm() < 1e-6 * (1.0 + a.norm()), "{mode:?}");
        }
        for (mode, u) in [
            (ControlMode::Cartesian, ControlVector::from([0.3, 0.5])),
            (ControlMode::Polar, ControlVector::from([0.6, 1.1])),
        ] {
            let m = DescentModel::new(params(), mode).unwrap();
            let a = eval_jacobian(&m, &x, &u).unwrap();
            let b = eval_jacobian_fd(&m, &x, &u).unwrap();
            assert!((&a - &b).norm() < 1e-6 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn dispersion_modes() {
        let mut p = params();
        let m = DescentModel::new(p.clone(), ControlMode::Cartesian).unwrap();
        let g = crate::dynamics::eval_dispersion(&m, &StateVector::from([0.0, 0.0, 0.0, 0.0, 20000.0]), &ControlVector::zeros(2)).unwrap();
        assert_eq!(g[(2, 0)], 100.0 / 40000.0);
        p.dispersion_mode = DispersionMode::MassScaled;
        let m = DescentModel::new(p, ControlMode::Cartesian).unwrap();
        let g = crate::dynamics::eval_dispersion(&m, &StateVector::from([0.0, 0.0, 0.0, 0.0, 20000.0]), &ControlVector::zeros(2)).unwrap();
        assert_eq!(g[(2, 0)], 100.0 / 20000.0);
        assert_eq!(g[(3, 0)], 10.0 / 20000.0);
    }

    #[test]
    fn problem_layouts() {
        let cfg = ScenarioConfig::default();
        let p4 = crate::ocp::transcribe(build_problem4(&cfg).unwrap(), 150).unwrap();
        assert_eq!(p4.dim(), 301);
        assert_eq!(p4.n_ineq(), 0);
        let p6 = crate::ocp::transcribe(build_problem6(&cfg).unwrap(), 150).unwrap();
        assert_eq!(p6.dim(), 1501);
        assert_eq!(p6.n_ineq(), 300);
        let z = p6.ocp.chance_constraints[0].margin();
        assert!((z - 2.3263478740).abs() < 1e-9);
    }

    #[test]
    fn profile_classification() {
        let p = classify_norm_profile(&[0.2, 0.2, 0.5, 0.8, 0.8], 0.2, 0.8, 1e-3);
        assert!(p.is_min_max());
        assert_eq!(p.pattern, "Min-Max");
        assert_eq!(p.interior_nodes, 1);
        let p = classify_norm_profile(&[0.8, 0.2, 0.8], 0.2, 0.8, 1e-3);
        assert_eq!(p.switches(), 2);
        assert!(!p.is_min_max());
    }

    #[test]
    fn default_scenario_is_valid() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let b = cfg.initial_belief().unwrap();
        assert_eq!(b.cov.std_devs(), vec![10.0, 10.0, 1.0, 1.0, 40.0]);
        let h = cfg.initial_heading();
        assert!(h > 0.0 && h < FRAC_PI_2);
    }
}
