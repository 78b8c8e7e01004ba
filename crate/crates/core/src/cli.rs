//! Command-line front end: TOML run configuration, scenario execution and
//! CSV/JSON artifacts.
//!
//! Every CSV starts with the schema line [`SCHEMA_HEADER`]. Files are written
//! to a temporary sibling and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accessibility::{lifted_rank, plain_rank, DEFAULT_TOL_SV};
use crate::bounds::{
    constraint_lhs, controllability_probe, empirical_error, empirical_jacobian_envelope, log_log_slope, ErrorBudget, ProbeRow, ProbeSetup,
};
use crate::descent::{
    feedback_rank_samples, random_rank_point, rank_model, reference_rank_controls, solve_scenario, ControlMode, DescentModel, Scenario,
    ScenarioConfig,
};
use crate::dynamics::{
    ControlLinearModel, ControlTrajectory, ControlVector, CovarianceMatrix, DynamicsModel, GaussianBelief, Interpolation, StateVector,
};
use crate::error::{Error, Result};
use crate::ocp::{transcribe, OuterRecord, SolveOptions, SolveStatus};
use crate::propagate::{propagate, BeliefTrajectory, CostBreakdown};
use crate::simulate::{monte_carlo_observed, relative_errors, EnsembleStats, SimOptions};

/// First line of every CSV artifact.
pub const SCHEMA_HEADER: &str = "# statlin-plan v1";
pub const SCHEMA_VERSION: &str = "statlin-plan v1";

/// Terminal residual accepted as feasible, scaled units.
const EQ_FEASIBLE: f64 = 1e-4;
/// Per-node inequality violation accepted as feasible.
const INEQ_FEASIBLE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "statlin-plan", version, about = "Robust motion planning under stochastic dynamics via statistical linearization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML). Defaults to the reference landing scenario.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the simulation and sampling seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `solve` only: print the transcription summary and stop.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Overrides `simulation.n_paths`.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Overrides `bound.epsilon`.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the configured robust planning problem.
    Solve,
    /// Monte Carlo ensemble on a solved control schedule.
    Simulate,
    /// Lie-bracket rank tests for the open-loop and feedback families.
    CheckAccessibility,
    /// Approximation-error functional against the Monte Carlo errors.
    VerifyBound,
    /// Time-rescaling probe on the Brockett integrator.
    Probe,
    /// Print the reference configuration.
    PrintDefaultConfig,
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub nodes: usize,
    pub steps_per_interval: usize,
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub max_total_inner: usize,
    /// Start Problem 5 from the Problem 6 optimum.
    pub continuation: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolveOptions::default();
        Self {
            nodes: 150,
            steps_per_interval: 1,
            tol_kkt: o.tol_kkt,
            tol_feas: o.tol_feas,
            max_outer: o.max_outer,
            max_inner: o.max_inner,
            max_total_inner: o.max_total_inner,
            continuation: true,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolveOptions {
        SolveOptions {
            tol_kkt: self.tol_kkt,
            tol_feas: self.tol_feas,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            max_total_inner: self.max_total_inner,
            ..SolveOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub n_paths: usize,
    /// Euler–Maruyama step; defaults to a tenth of the control interval.
    pub dt: Option<f64>,
    pub seed: u64,
    /// Paths written to `paths_sample.csv`.
    pub sample_paths: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            dt: None,
            seed: 42,
            sample_paths: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    /// Tolerance of the membership test.
    pub epsilon: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self { epsilon: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub etas: Vec<f64>,
    pub horizon: f64,
    pub steps_per_interval: usize,
    /// Brockett noise intensity, `g = dispersion * I`.
    pub dispersion: f64,
    /// `phi(r) = lipschitz * r`.
    pub lipschitz: f64,
    /// `alpha(s) = C exp(C s)`.
    pub alpha_constant: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            etas: vec![0.4, 0.2, 0.1, 0.05],
            horizon: 1.0,
            steps_per_interval: 200,
            dispersion: 0.1,
            lipschitz: 1.0,
            alpha_constant: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccessibilityConfig {
    /// Random points for the open-loop family.
    pub points: usize,
    pub depth: usize,
    pub feedback_points: usize,
    pub feedback_depth: usize,
    /// Latin-hypercube feedback parameters per point.
    pub feedback_samples: usize,
    pub tol_sv: f64,
    pub seed: u64,
}

impl Default for AccessibilityConfig {
    fn default() -> Self {
        Self {
            points: 20,
            depth: 4,
            feedback_points: 10,
            feedback_depth: 2,
            feedback_samples: 30,
            tol_sv: DEFAULT_TOL_SV,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Whole run configuration; every section falls back to the reference
/// landing scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub model: ScenarioConfig,
    pub solver: SolverConfig,
    pub simulation: SimulationConfig,
    pub bound: BoundConfig,
    pub probe: ProbeConfig,
    pub accessibility: AccessibilityConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Problem4,
            model: ScenarioConfig::default(),
            solver: SolverConfig::default(),
            simulation: SimulationConfig::default(),
            bound: BoundConfig::default(),
            probe: ProbeConfig::default(),
            accessibility: AccessibilityConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scenario.build(&self.model).map_err(|e| Error::Config(e.to_string()))?;
        let s = &self.solver;
        if s.nodes < 10 {
            return bad("solver.nodes must be at least 10");
        }
        if s.steps_per_interval == 0 {
            return bad("solver.steps_per_interval must be positive");
        }
        if !(s.tol_kkt > 0.0 && s.tol_feas > 0.0) {
            return bad("solver tolerances must be positive");
        }
        if self.simulation.n_paths < 2 {
            return bad("simulation.n_paths must be at least 2");
        }
        if let Some(dt) = self.simulation.dt {
            if !(dt > 0.0) {
                return bad("simulation.dt must be positive");
            }
        }
        if !(self.bound.epsilon >= 0.0) {
            return bad("bound.epsilon must be nonnegative");
        }
        let p = &self.probe;
        if p.etas.is_empty() || p.etas.iter().any(|e| !(*e > 0.0 && *e <= p.horizon)) {
            return bad("probe.etas must lie in (0, probe.horizon]");
        }
        if !(p.dispersion >= 0.0 && p.lipschitz > 0.0 && p.alpha_constant > 0.0 && p.steps_per_interval > 0) {
            return bad("probe parameters out of range");
        }
        let a = &self.accessibility;
        if a.depth < 2 || a.feedback_depth < 2 || !(a.tol_sv > 0.0) || a.feedback_samples < 2 {
            return bad("accessibility needs depth >= 2, at least two samples and tol_sv > 0");
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, cli: &Cli) -> Result<Self> {
        if let Some(out) = &cli.out {
            self.output.dir = out.clone();
        }
        if let Some(seed) = cli.seed {
            self.simulation.seed = seed;
            self.accessibility.seed = seed;
        }
        if let Some(n) = cli.paths {
            self.simulation.n_paths = n;
        }
        if let Some(eps) = cli.epsilon {
            self.bound.epsilon = eps;
        }
        self.validate()?;
        Ok(self)
    }

    fn planning_model(&self) -> Result<DescentModel> {
        self.model.model(self.scenario.control_mode(&self.model))
    }
}

/// Exit code for an error: 2 for configuration and input problems, 1 for
/// numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Artifact { .. } | Error::Io(_) => 2,
        _ => 1,
    }
}

// ---------------------------------------------------------------------------
// Artifacts

fn artifact_error(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Artifact {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| artifact_error(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut buf = format!("{SCHEMA_HEADER}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(|e| artifact_error(path, e))?;
        for row in rows {
            w.serialize(row).map_err(|e| artifact_error(path, e))?;
        }
        w.flush()?;
    }
    write_atomic(path, &buf)
}

/// Header names and numeric rows of a CSV artifact.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| artifact_error(path, e))?;
    if !text.starts_with(SCHEMA_HEADER) {
        return Err(artifact_error(path, format!("missing schema line `{SCHEMA_HEADER}`")));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| artifact_error(path, e))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.deserialize::<Vec<f64>>() {
        rows.push(rec.map_err(|e| artifact_error(path, e))?);
    }
    Ok((header, rows))
}

fn upper_triangle_names(n: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            out.push(format!("p{i}{j}"));
        }
    }
    out
}

fn moment_row(t: f64, m: &DVector<f64>, p: &DMatrix<f64>) -> Vec<f64> {
    let n = m.len();
    let mut row = vec![t];
    row.extend(m.iter());
    for i in 0..n {
        for j in i..n {
            row.push(p[(i, j)]);
        }
    }
    row
}

fn moments_from_row(row: &[f64], n: usize, path: &Path) -> Result<(f64, StateVector, CovarianceMatrix)> {
    if row.len() != 1 + n + n * (n + 1) / 2 {
        return Err(artifact_error(path, format!("row has {} columns", row.len())));
    }
    let m = StateVector::from(row[1..1 + n].to_vec());
    let mut p = DMatrix::zeros(n, n);
    let mut k = 1 + n;
    for i in 0..n {
        for j in i..n {
            p[(i, j)] = row[k];
            p[(j, i)] = row[k];
            k += 1;
        }
    }
    Ok((row[0], m, CovarianceMatrix::new_unchecked(p)))
}

fn state_names() -> Vec<String> {
    ["y", "z", "vy", "vz", "mass"].iter().map(|s| s.to_string()).collect()
}

fn control_names(mode: ControlMode) -> Vec<String> {
    let v: Vec<&str> = match mode {
        ControlMode::Cartesian => vec!["uy", "uz"],
        ControlMode::Polar => vec!["rho", "theta"],
        ControlMode::Feedback | ControlMode::SaturatedFeedback { .. } => vec![
            "rho", "theta", "kn_y", "kn_z", "kn_vy", "kn_vz", "kd_y", "kd_z", "kd_vy", "kd_vz",
        ],
    };
    v.into_iter().map(String::from).collect()
}

pub fn write_belief_trajectory(path: &Path, traj: &BeliefTrajectory) -> Result<()> {
    let n = traj.state_dim();
    let mut header = vec!["t".to_string()];
    header.extend(if n == 5 { state_names() } else { (0..n).map(|i| format!("m{i}")).collect() });
    header.extend(upper_triangle_names(n));
    let rows: Vec<Vec<f64>> = traj
        .times
        .iter()
        .zip(&traj.beliefs)
        .map(|(t, b)| moment_row(*t, &b.mean, b.cov.matrix()))
        .collect();
    write_csv(path, &header, &rows)
}

pub fn read_belief_trajectory(path: &Path) -> Result<BeliefTrajectory> {
    let (header, rows) = read_csv(path)?;
    let n = moment_dim(header.len()).ok_or_else(|| artifact_error(path, "column count is not 1 + n + n(n+1)/2"))?;
    let mut traj = BeliefTrajectory {
        times: Vec::with_capacity(rows.len()),
        beliefs: Vec::with_capacity(rows.len()),
    };
    for row in &rows {
        let (t, m, p) = moments_from_row(row, n, path)?;
        traj.times.push(t);
        traj.beliefs.push(GaussianBelief { mean: m, cov: p });
    }
    if traj.len() < 2 {
        return Err(artifact_error(path, "fewer than two time points"));
    }
    Ok(traj)
}

fn moment_dim(cols: usize) -> Option<usize> {
    (1..64).find(|n| 1 + n + n * (n + 1) / 2 == cols)
}

pub fn write_ensemble_stats(path: &Path, stats: &EnsembleStats) -> Result<()> {
    let n = stats.mean.first().map(|m| m.dim()).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    header.extend(state_names().into_iter().take(n));
    header.extend(upper_triangle_names(n));
    let rows: Vec<Vec<f64>> = stats
        .times
        .iter()
        .zip(stats.mean.iter().zip(&stats.cov))
        .map(|(t, (m, p))| moment_row(*t, m, p.matrix()))
        .collect();
    write_csv(path, &header, &rows)
}

pub fn read_ensemble_stats(path: &Path, sample_count: usize, seed: u64) -> Result<EnsembleStats> {
    let traj = read_belief_trajectory(path)?;
    Ok(EnsembleStats {
        times: traj.times,
        mean: traj.beliefs.iter().map(|b| b.mean.clone()).collect(),
        cov: traj.beliefs.into_iter().map(|b| b.cov).collect(),
        sample_count,
        seed,
    })
}

/// `control.csv`: one row per interval with its start and end time, the
/// decision components and the thrust norm along the mean.
pub fn write_controls(path: &Path, mode: ControlMode, ctrl: &ControlTrajectory, norms: &[f64]) -> Result<()> {
    let mut header = vec!["t_start".to_string(), "t_end".to_string()];
    header.extend(control_names(mode));
    header.push("norm".into());
    let nodes = ctrl.nodes();
    let rows: Vec<Vec<f64>> = ctrl
        .values()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut row = vec![nodes[i], nodes[i + 1]];
            row.extend(u.iter());
            row.push(norms[i]);
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn read_controls(path: &Path) -> Result<ControlTrajectory> {
    let (header, rows) = read_csv(path)?;
    if header.len() < 4 || rows.is_empty() {
        return Err(artifact_error(path, "expected t_start, t_end, controls and norm columns"));
    }
    let k = header.len() - 3;
    let mut nodes = vec![rows[0][0]];
    let mut values = Vec::with_capacity(rows.len());
    for row in &rows {
        if row.len() != header.len() {
            return Err(artifact_error(path, "ragged row"));
        }
        nodes.push(row[1]);
        values.push(ControlVector::from(row[2..2 + k].to_vec()));
    }
    ControlTrajectory::new(nodes, values, Interpolation::PiecewiseConstant).map_err(|e| artifact_error(path, e))
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub tf: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: String,
    pub scenario: Scenario,
    pub status: SolveStatus,
    pub converged: bool,
    /// Terminal residual and path rows within the acceptance thresholds.
    pub feasible: bool,
    pub tf: f64,
    pub objective: f64,
    pub breakdown: CostBreakdown,
    pub final_mean: Vec<f64>,
    /// Position and velocity standard deviations at `tf`.
    pub final_std: Vec<f64>,
    pub eq_violation: f64,
    pub ineq_violation: f64,
    pub kkt: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub nodes: usize,
    pub steps_per_interval: usize,
    pub continued_from: Option<SeedSummary>,
    pub history: Vec<OuterRecord>,
}

/// Transcription summary printed by `solve --dry-run`.
#[derive(Debug, Clone, Serialize)]
pub struct DryRun {
    pub scenario: Scenario,
    pub nodes: usize,
    pub decision_dim: usize,
    pub equality_rows: usize,
    pub inequality_rows: usize,
    pub free_final_time: bool,
}

#[derive(Debug)]
pub enum Outcome {
    DryRun(DryRun),
    Solved(Box<RunReport>),
    Simulated(SimulationSummary),
    Accessibility(AccessibilitySummary),
    Bound(BoundReport),
    Probe(ProbeReport),
    Config(String),
}

impl Outcome {
    /// Exit code of a command that ran to completion.
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Solved(r) if !r.feasible => 1,
            _ => 0,
        }
    }
}

pub fn cmd_solve(cfg: &RunConfig, dry_run: bool) -> Result<Outcome> {
    let s = &cfg.solver;
    if dry_run {
        let mut ocp = cfg.scenario.build(&cfg.model)?;
        ocp.steps_per_interval = s.steps_per_interval;
        let nlp = transcribe(ocp, s.nodes)?;
        return Ok(Outcome::DryRun(DryRun {
            scenario: cfg.scenario,
            nodes: s.nodes,
            decision_dim: nlp.dim(),
            equality_rows: nlp.n_eq(),
            inequality_rows: nlp.n_ineq(),
            free_final_time: nlp.layout.free_tf,
        }));
    }
    let run = solve_scenario(&cfg.model, cfg.scenario, s.nodes, s.steps_per_interval, &s.options(), s.continuation)?;
    let r = &run.report;
    let z = r.decision_vector();
    let ctrl = run.nlp.control_trajectory(&z)?;
    let traj = run.nlp.belief_trajectory(&z)?;
    let model = cfg.planning_model()?;
    let stride = s.steps_per_interval;
    let norms = ctrl
        .values()
        .iter()
        .enumerate()
        .map(|(i, u)| Ok(model.physical_control(&traj.beliefs[i * stride].mean, u)?.norm()))
        .collect::<Result<Vec<f64>>>()?;
    let dir = &cfg.output.dir;
    write_belief_trajectory(&dir.join("belief_trajectory.csv"), &traj)?;
    write_controls(&dir.join("control.csv"), cfg.scenario.control_mode(&cfg.model), &ctrl, &norms)?;
    let fin = traj.final_belief();
    let report = RunReport {
        schema: SCHEMA_VERSION.into(),
        scenario: cfg.scenario,
        status: r.status,
        converged: r.converged,
        feasible: r.eq_violation <= EQ_FEASIBLE && r.ineq_violation <= INEQ_FEASIBLE,
        tf: r.tf,
        objective: r.objective,
        breakdown: r.breakdown,
        final_mean: fin.mean.iter().copied().collect(),
        final_std: fin.cov.std_devs().into_iter().take(4).collect(),
        eq_violation: r.eq_violation,
        ineq_violation: r.ineq_violation,
        kkt: r.kkt,
        iterations: r.iterations,
        outer_iterations: r.outer_iterations,
        nodes: s.nodes,
        steps_per_interval: s.steps_per_interval,
        continued_from: run.seed.as_ref().map(|p| SeedSummary {
            tf: p.tf,
            status: p.status,
            iterations: p.iterations,
        }),
        history: r.history.clone(),
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(Outcome::Solved(Box::new(report)))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub schema: String,
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
    /// Fraction of (path, node) samples whose commanded thrust norm lies in
    /// `[u_min, u_max]` before saturation.
    pub within_bounds_fraction: f64,
    pub max_mean_relative_error: f64,
    pub max_cov_relative_error: f64,
}

/// Control nodes of one sample path at which the commanded thrust norm,
/// before saturation, lies in `[u_min, u_max]`.
pub fn nodes_within_bounds(
    model: &DescentModel,
    ctrl: &ControlTrajectory,
    times: &[f64],
    states: &[StateVector],
    u_min: f64,
    u_max: f64,
) -> usize {
    let nodes = ctrl.nodes();
    let mut j = 0;
    let mut inside = 0;
    for (i, u) in ctrl.values().iter().enumerate() {
        while j + 1 < times.len() && times[j] < nodes[i] - 1e-9 * (1.0 + nodes[i]) {
            j += 1;
        }
        let s = model.commanded_norm(states[j].as_slice(), u.as_slice());
        if s >= u_min - 1e-12 && s <= u_max + 1e-12 {
            inside += 1;
        }
    }
    inside
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome> {
    let dir = &cfg.output.dir;
    let ctrl = read_controls(&dir.join("control.csv"))?;
    let plan = cfg.planning_model()?;
    if ctrl.control_dim() != plan.control_dim() {
        return Err(artifact_error(
            &dir.join("control.csv"),
            format!("{} control columns, scenario expects {}", ctrl.control_dim(), plan.control_dim()),
        ));
    }
    let sim = cfg.scenario.simulation_model(&cfg.model)?;
    let init = cfg.model.initial_belief()?;
    let mut opts = SimOptions::for_control(&ctrl, cfg.simulation.n_paths, cfg.simulation.seed);
    if let Some(dt) = cfg.simulation.dt {
        opts.dt = dt;
    }
    let (u_min, u_max) = (cfg.model.rocket.u_min, cfg.model.rocket.u_max);
    let keep = cfg.simulation.sample_paths;
    let (stats, observed) = monte_carlo_observed(&sim, &init, &ctrl, &opts, |path, times, states| {
        let inside = nodes_within_bounds(&sim, &ctrl, times, states, u_min, u_max);
        let sample = (path < keep).then(|| states.to_vec());
        (inside, sample)
    })?;
    let total: usize = observed.iter().map(|o| o.0).sum();
    let within = total as f64 / (observed.len() * ctrl.n_intervals()) as f64;
    let mut rows = Vec::new();
    for (p, (_, sample)) in observed.iter().enumerate() {
        if let Some(states) = sample {
            for (t, x) in stats.times.iter().zip(states) {
                let mut row = vec![p as f64, *t];
                row.extend(x.iter());
                rows.push(row);
            }
        }
    }
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend(state_names());
    write_csv(&dir.join("paths_sample.csv"), &header, &rows)?;
    write_ensemble_stats(&dir.join("ensemble_stats.csv"), &stats)?;

    let traj = propagate(&plan, &init, &ctrl, cfg.solver.steps_per_interval)?;
    let on_grid = stats.restrict_to(&traj.times)?;
    let (em, ec) = relative_errors(&on_grid, &traj)?;
    let rows: Vec<Vec<f64>> = traj.times.iter().zip(em.iter().zip(&ec)).map(|(t, (a, b))| vec![*t, *a, *b]).collect();
    write_csv(
        &dir.join("relative_errors.csv"),
        &["t".into(), "mean_rel_err".into(), "cov_rel_err".into()],
        &rows,
    )?;
    let summary = SimulationSummary {
        schema: SCHEMA_VERSION.into(),
        n_paths: stats.sample_count,
        seed: stats.seed,
        dt: opts.dt,
        within_bounds_fraction: within,
        max_mean_relative_error: em.iter().copied().fold(0.0, f64::max),
        max_cov_relative_error: ec.iter().copied().fold(0.0, f64::max),
    };
    write_json(&dir.join("simulation.json"), &summary)?;
    Ok(Outcome::Simulated(summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub schema: String,
    pub epsilon: f64,
    /// Sup of the drift Jacobian norm along the mean, used as constant `phi`.
    pub jacobian_envelope: f64,
    pub constraint_lhs: f64,
    pub inside: bool,
    pub sup_mean_err_sq: f64,
    pub sup_cov_err: f64,
    pub mc_standard_error_mean_sq: f64,
    pub mc_standard_error_cov: f64,
    /// `sup_mean_err_sq + sup_cov_err <= constraint_lhs + 3 SE`.
    pub bound_holds: bool,
}

/// Bound check of a statlin trajectory against an ensemble on its grid.
pub fn bound_report(
    model: &dyn DynamicsModel,
    ctrl: &ControlTrajectory,
    traj: &BeliefTrajectory,
    stats: &EnsembleStats,
    epsilon: f64,
) -> Result<BoundReport> {
    let on_grid = stats.restrict_to(&traj.times)?;
    let envelope = empirical_jacobian_envelope(model, ctrl, traj, &[])?;
    let budget = ErrorBudget::from_envelope(f64::INFINITY, envelope)?;
    let lhs = constraint_lhs(&budget, ctrl, traj)?;
    let (mean_sq, cov) = empirical_error(traj, &on_grid)?;
    // Standard error of the squared-mean error: 2 |m - m_hat| se + se^2.
    let mut se_mean_sq: f64 = 0.0;
    let mut se_cov: f64 = 0.0;
    for ((sm, sc), (m, b)) in on_grid.standard_errors().into_iter().zip(on_grid.mean.iter().zip(&traj.beliefs)) {
        let d = (&m.0 - &b.mean.0).norm();
        se_mean_sq = se_mean_sq.max(2.0 * d * sm + sm * sm);
        se_cov = se_cov.max(sc);
    }
    Ok(BoundReport {
        schema: SCHEMA_VERSION.into(),
        epsilon,
        jacobian_envelope: envelope,
        constraint_lhs: lhs,
        inside: lhs <= epsilon,
        sup_mean_err_sq: mean_sq,
        sup_cov_err: cov,
        mc_standard_error_mean_sq: se_mean_sq,
        mc_standard_error_cov: se_cov,
        bound_holds: mean_sq + cov <= lhs + 3.0 * (se_mean_sq + se_cov),
    })
}

pub fn cmd_verify_bound(cfg: &RunConfig) -> Result<Outcome> {
    let dir = &cfg.output.dir;
    let ctrl = read_controls(&dir.join("control.csv"))?;
    let traj = read_belief_trajectory(&dir.join("belief_trajectory.csv"))?;
    let stats = read_ensemble_stats(&dir.join("ensemble_stats.csv"), cfg.simulation.n_paths, cfg.simulation.seed)?;
    let model = cfg.planning_model()?;
    let report = bound_report(&model, &ctrl, &traj, &stats, cfg.bound.epsilon).map_err(|e| match e {
        Error::GridMismatch(m) => artifact_error(&dir.join("ensemble_stats.csv"), m),
        other => other,
    })?;
    write_json(&dir.join("bound_report.json"), &report)?;
    Ok(Outcome::Bound(report))
}

#[derive(Debug, Clone, Serialize)]
pub struct AccessibilityRow {
    pub family: String,
    pub point: Vec<f64>,
    pub lifted_dim: usize,
    pub target_dim: usize,
    pub plain_rank: usize,
    pub verdict: String,
    /// `sigma_k / sigma_max` around the rank cut.
    pub last_kept_ratio: f64,
    pub first_dropped_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AccessibilitySummary {
    pub schema: String,
    pub open_loop_max_lifted: usize,
    pub feedback_min_lifted: usize,
    pub plain_rank_min: usize,
    pub rows: Vec<AccessibilityRow>,
}

fn rank_row<M: DynamicsModel + 'static>(
    family: &str,
    model: Arc<M>,
    x: &StateVector,
    samples: &[ControlVector],
    depth: usize,
    tol: f64,
) -> Result<AccessibilityRow> {
    let r = lifted_rank(model.clone(), x, samples, depth, tol)?;
    let plain = plain_rank(model, x, samples, 2, tol)?;
    let smax = r.singular_values.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let ratio = |k: usize| r.singular_values.get(k).map_or(0.0, |s| s / smax);
    Ok(AccessibilityRow {
        family: family.into(),
        point: r.point.clone(),
        lifted_dim: r.lifted_dim,
        target_dim: r.target_dim,
        plain_rank: plain,
        verdict: r.verdict().into(),
        last_kept_ratio: if r.lifted_dim > 0 { ratio(r.lifted_dim - 1) } else { 0.0 },
        first_dropped_ratio: ratio(r.lifted_dim),
    })
}

/// Rank tables for the open-loop family (reference controls) and the
/// feedback family (Latin-hypercube parameters), in nondimensional
/// coordinates.
pub fn accessibility_summary(cfg: &RunConfig) -> Result<AccessibilitySummary> {
    let a = &cfg.accessibility;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let open = Arc::new(rank_model(&cfg.model.rocket, ControlMode::Cartesian)?);
    let fb = Arc::new(rank_model(&cfg.model.rocket, ControlMode::Feedback)?);
    let controls = reference_rank_controls();
    let mut rows = Vec::new();
    for _ in 0..a.points {
        let x = random_rank_point(&mut rng);
        rows.push(rank_row("open_loop", open.clone(), &x, &controls, a.depth, a.tol_sv)?);
    }
    for _ in 0..a.feedback_points {
        let x = random_rank_point(&mut rng);
        let nus = feedback_rank_samples(&mut rng, a.feedback_samples)?;
        rows.push(rank_row("feedback", fb.clone(), &x, &nus, a.feedback_depth, a.tol_sv)?);
    }
    let dims = |fam: &str| rows.iter().filter(|r| r.family == fam).map(|r| r.lifted_dim).collect::<Vec<_>>();
    let (open_dims, fb_dims) = (dims("open_loop"), dims("feedback"));
    Ok(AccessibilitySummary {
        schema: SCHEMA_VERSION.into(),
        open_loop_max_lifted: open_dims.iter().copied().max().unwrap_or(0),
        feedback_min_lifted: fb_dims.iter().copied().min().unwrap_or(0),
        plain_rank_min: rows.iter().filter(|r| r.family == "open_loop").map(|r| r.plain_rank).min().unwrap_or(0),
        rows,
    })
}

pub fn cmd_check_accessibility(cfg: &RunConfig) -> Result<Outcome> {
    let summary = accessibility_summary(cfg)?;
    let dir = &cfg.output.dir;
    let mut text = format!("{SCHEMA_HEADER}\nfamily,point,lifted_dim,target_dim,plain_rank,verdict\n");
    let mut counters = std::collections::HashMap::new();
    for r in &summary.rows {
        let k = counters.entry(r.family.clone()).or_insert(0usize);
        text.push_str(&format!("{},{},{},{},{},{}\n", r.family, k, r.lifted_dim, r.target_dim, r.plain_rank, r.verdict));
        *k += 1;
    }
    write_atomic(&dir.join("accessibility.csv"), text.as_bytes())?;
    write_json(&dir.join("accessibility.json"), &summary)?;
    Ok(Outcome::Accessibility(summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub schema: String,
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of log(constraint value) against log(eta).
    pub slope: f64,
    pub terminal_error_spread: f64,
}

/// Brockett integrator from the origin to `(1/2, 1/2, 1/4)` with `P0 = 0`,
/// base control `(1, 0)` then `(0, 1)` on `[0, 1]`.
pub fn brockett_probe(p: &ProbeConfig) -> Result<ProbeReport> {
    let model = ControlLinearModel::brockett(DMatrix::identity(3, 3) * p.dispersion);
    let base = ControlTrajectory::new(
        vec![0.0, 0.5, 1.0],
        vec![ControlVector::from([1.0, 0.0]), ControlVector::from([0.0, 1.0])],
        Interpolation::PiecewiseConstant,
    )?;
    let m0 = StateVector::zeros(3);
    let mf = StateVector::from([0.5, 0.5, 0.25]);
    let (l, c) = (p.lipschitz, p.alpha_constant);
    let budget = ErrorBudget::exponential(f64::INFINITY, move |r| l * r, c)?;
    let setup = ProbeSetup {
        horizon: p.horizon,
        steps_per_interval: p.steps_per_interval,
    };
    let rows = controllability_probe(&model, &m0, &mf, &base, &p.etas, &CovarianceMatrix::zeros(3), &budget, &setup)?;
    let etas: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    let values: Vec<f64> = rows.iter().map(|r| r.constraint_value).collect();
    let errs = rows.iter().map(|r| r.terminal_error);
    let spread = errs.clone().fold(f64::NEG_INFINITY, f64::max) - errs.fold(f64::INFINITY, f64::min);
    Ok(ProbeReport {
        schema: SCHEMA_VERSION.into(),
        slope: log_log_slope(&etas, &values),
        terminal_error_spread: spread,
        rows,
    })
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<Outcome> {
    let report = brockett_probe(&cfg.probe)?;
    let dir = &cfg.output.dir;
    let rows: Vec<Vec<f64>> = report.rows.iter().map(|r| vec![r.eta, r.constraint_value, r.terminal_error]).collect();
    write_csv(
        &dir.join("probe.csv"),
        &["eta".into(), "constraint_value".into(), "terminal_error".into()],
        &rows,
    )?;
    write_json(&dir.join("probe.json"), &report)?;
    Ok(Outcome::Probe(report))
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    if cli.command == Command::PrintDefaultConfig {
        return Ok(Outcome::Config(RunConfig::default().to_toml()));
    }
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(cli)?;
    match cli.command {
        Command::Solve => cmd_solve(&cfg, cli.dry_run),
        Command::Simulate => cmd_simulate(&cfg),
        Command::CheckAccessibility => cmd_check_accessibility(&cfg),
        Command::VerifyBound => cmd_verify_bound(&cfg),
        Command::Probe => cmd_probe(&cfg),
        Command::PrintDefaultConfig => unreachable!(),
    }
}

/// One-line human summary of an outcome.
pub fn summary_line(outcome: &Outcome) -> String {
    match outcome {
        Outcome::DryRun(d) => serde_json::to_string_pretty(d).unwrap_or_default(),
        Outcome::Solved(r) => format!(
            "{:?}: status {:?}, feasible {}, t_f = {:.3} s, final std = {:?}",
            r.scenario, r.status, r.feasible, r.tf, r.final_std
        ),
        Outcome::Simulated(s) => format!(
            "{} paths: max relative error mean {:.3e}, cov {:.3e}; commanded norm within bounds {:.2}%",
            s.n_paths,
            s.max_mean_relative_error,
            s.max_cov_relative_error,
            100.0 * s.within_bounds_fraction
        ),
        Outcome::Accessibility(a) => format!(
            "open-loop lifted rank <= {}, feedback lifted rank >= {}, plain rank >= {}",
            a.open_loop_max_lifted, a.feedback_min_lifted, a.plain_rank_min
        ),
        Outcome::Bound(b) => format!(
            "constraint lhs {:.3e} ({} eps = {}), empirical error {:.3e}, bound holds: {}",
            b.constraint_lhs,
            if b.inside { "inside" } else { "outside" },
            b.epsilon,
            b.sup_mean_err_sq + b.sup_cov_err,
            b.bound_holds
        ),
        Outcome::Probe(p) => format!("log-log slope {:.3}, terminal error spread {:.2e}", p.slope, p.terminal_error_spread),
        Outcome::Config(text) => text.clone(),
    }
}
