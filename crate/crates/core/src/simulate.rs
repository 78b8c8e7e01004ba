//! Euler–Maruyama Monte Carlo ground truth for the stochastic dynamics.
//!
//! Gaussian increments come from a counter-based stream: ChaCha8 keyed by the
//! seed, with the path id as stream number and the step index selecting the
//! word position. A path's noise therefore does not depend on how paths are
//! scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{ControlTrajectory, CovarianceMatrix, DynamicsModel, GaussianBelief, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::propagate::BeliefTrajectory;

/// Per-time sample mean and unbiased sample covariance of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean: Vec<StateVector>,
    pub cov: Vec<CovarianceMatrix>,
    pub sample_count: usize,
    pub seed: u64,
}

impl EnsembleStats {
    /// Keeps only the entries whose times match `times` (to 1e-9 relative).
    pub fn restrict_to(&self, times: &[f64]) -> Result<Self> {
        let mut out = Self {
            times: Vec::with_capacity(times.len()),
            mean: Vec::with_capacity(times.len()),
            cov: Vec::with_capacity(times.len()),
            sample_count: self.sample_count,
            seed: self.seed,
        };
        let mut j = 0;
        for &t in times {
            let tol = 1e-9 * (1.0 + t.abs());
            while j < self.times.len() && self.times[j] < t - tol {
                j += 1;
            }
            if j == self.times.len() || (self.times[j] - t).abs() > tol {
                return Err(Error::GridMismatch(format!("time {t} not on the simulation grid")));
            }
            out.times.push(self.times[j]);
            out.mean.push(self.mean[j].clone());
            out.cov.push(self.cov[j].clone());
        }
        Ok(out)
    }

    /// Standard errors of the mean (Euclidean norm) and of the covariance
    /// estimate (Frobenius norm), per time, assuming Gaussian samples.
    pub fn standard_errors(&self) -> Vec<(f64, f64)> {
        let nf = self.sample_count as f64;
        self.cov
            .iter()
            .map(|p| {
                let se_mean = (p.trace().max(0.0) / nf).sqrt();
                let n = p.dim();
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += p[(i, i)] * p[(j, j)] + p[(i, j)] * p[(i, j)];
                    }
                }
                (se_mean, (s.max(0.0) / (nf - 1.0)).sqrt())
            })
            .collect()
    }
}

/// Simulation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl SimOptions {
    /// Defaults to a step of one tenth of the first control interval.
    pub fn for_control(ctrl: &ControlTrajectory, n_paths: usize, seed: u64) -> Self {
        let nodes = ctrl.nodes();
        Self {
            dt: (nodes[1] - nodes[0]) / 10.0,
            n_paths,
            seed,
        }
    }
}

/// Counter-based standard-normal source.
#[derive(Debug, Clone, Copy)]
pub struct NoiseStream {
    seed: u64,
    words_per_block: u128,
}

impl NoiseStream {
    pub fn new(seed: u64, max_normals_per_block: usize) -> Self {
        let pairs = max_normals_per_block.div_ceil(2).max(1) as u128;
        Self {
            seed,
            words_per_block: 4 * pairs,
        }
    }

    /// Fills `out` with the normals of `(path, block)`.
    pub fn fill(&self, path: u64, block: u64, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path);
        rng.set_word_pos(block as u128 * self.words_per_block);
        let mut i = 0;
        while i < out.len() {
            // Box–Muller on two 53-bit uniforms, u1 in (0, 1].
            let u1 = 1.0 - (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let r = (-2.0 * u1.ln()).sqrt();
            let a = std::f64::consts::TAU * u2;
            out[i] = r * a.cos();
            if i + 1 < out.len() {
                out[i + 1] = r * a.sin();
            }
            i += 2;
        }
    }
}

/// Number of Euler steps per control interval; `dt` must divide each interval.
fn substeps(ctrl: &ControlTrajectory, dt: f64) -> Result<Vec<usize>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    ctrl.nodes()
        .windows(2)
        .map(|w| {
            let len = w[1] - w[0];
            let k = (len / dt).round();
            if k < 1.0 || (k * dt - len).abs() > 1e-6 * len {
                Err(Error::InvalidArgument(format!("dt = {dt} does not divide control interval of length {len}")))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// Simulation time grid for `ctrl` at step `dt`.
pub fn simulation_grid(ctrl: &ControlTrajectory, dt: f64) -> Result<Vec<f64>> {
    let subs = substeps(ctrl, dt)?;
    let nodes = ctrl.nodes();
    let mut times = vec![0.0];
    for (i, &k) in subs.iter().enumerate() {
        let h = (nodes[i + 1] - nodes[i]) / k as f64;
        for s in 1..=k {
            times.push(if s == k { nodes[i + 1] } else { nodes[i] + h * s as f64 });
        }
    }
    Ok(times)
}

struct PathRunner<'a, M: ?Sized> {
    model: &'a M,
    ctrl: &'a ControlTrajectory,
    subs: Vec<usize>,
    noise: NoiseStream,
}

impl<'a, M: DynamicsModel + ?Sized> PathRunner<'a, M> {
    fn new(model: &'a M, ctrl: &'a ControlTrajectory, dt: f64, seed: u64) -> Result<Self> {
        check_dim("control", model.control_dim(), ctrl.control_dim())?;
        let subs = substeps(ctrl, dt)?;
        let noise = NoiseStream::new(seed, model.noise_dim().max(model.state_dim()));
        Ok(Self {
            model,
            ctrl,
            subs,
            noise,
        })
    }

    fn run(&self, x0: &DVector<f64>, path: u64) -> Result<Vec<StateVector>> {
        let (n, k, d) = (self.model.state_dim(), self.model.control_dim(), self.model.noise_dim());
        let mut x = x0.clone();
        let mut f = DVector::zeros(n);
        let mut g = DMatrix::zeros(n, d);
        let mut u = DVector::zeros(k);
        let mut xi = vec![0.0; d];
        let mut out = Vec::with_capacity(self.subs.iter().sum::<usize>() + 1);
        out.push(StateVector(x.clone()));
        let nodes = self.ctrl.nodes();
        let mut step: u64 = 0;
        for (i, &ksub) in self.subs.iter().enumerate() {
            let h = (nodes[i + 1] - nodes[i]) / ksub as f64;
            let sqrt_h = h.sqrt();
            for s in 0..ksub {
                let t = nodes[i] + h * s as f64;
                self.ctrl.eval_in_interval_into(i, t, &mut u);
                self.model.drift(&x, &u, &mut f).map_err(|e| path_error(e, path, t))?;
                self.model.dispersion(&x, &u, &mut g).map_err(|e| path_error(e, path, t))?;
                step += 1;
                self.noise.fill(path, step, &mut xi);
                for r in 0..n {
                    let mut noise = 0.0;
                    for c in 0..d {
                        noise += g[(r, c)] * xi[c];
                    }
                    x[r] += f[r] * h + noise * sqrt_h;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::BlowUp {
                        time: t + h,
                        reason: format!("non-finite state on path {path}"),
                    });
                }
                out.push(StateVector(x.clone()));
            }
        }
        Ok(out)
    }
}

fn path_error(e: Error, path: u64, t: f64) -> Error {
    match e {
        Error::ModelBreach(reason) => Error::ModelBreach(format!("path {path} at t = {t}: {reason}")),
        other => other,
    }
}

/// Single Euler–Maruyama path from a deterministic start, path id 0.
pub fn simulate_path<M: DynamicsModel + ?Sized>(
    model: &M,
    x0: &StateVector,
    ctrl: &ControlTrajectory,
    dt: f64,
    seed: u64,
) -> Result<Vec<StateVector>> {
    simulate_path_with_id(model, x0, ctrl, dt, seed, 0)
}

pub fn simulate_path_with_id<M: DynamicsModel + ?Sized>(
    model: &M,
    x0: &StateVector,
    ctrl: &ControlTrajectory,
    dt: f64,
    seed: u64,
    path: u64,
) -> Result<Vec<StateVector>> {
    check_dim("initial state", model.state_dim(), x0.dim())?;
    PathRunner::new(model, ctrl, dt, seed)?.run(x0, path)
}

/// Running mean and co-moment per time (Welford, merged with Chan's rule).
#[derive(Clone)]
struct Accumulator {
    count: usize,
    mean: Vec<DVector<f64>>,
    m2: Vec<DMatrix<f64>>,
}

impl Accumulator {
    fn new(len: usize, n: usize) -> Self {
        Self {
            count: 0,
            mean: vec![DVector::zeros(n); len],
            m2: vec![DMatrix::zeros(n, n); len],
        }
    }

    fn push(&mut self, path: &[StateVector]) {
        self.count += 1;
        let c = self.count as f64;
        for (t, x) in path.iter().enumerate() {
            let delta = &x.0 - &self.mean[t];
            self.mean[t].axpy(1.0 / c, &delta, 1.0);
            let delta2 = &x.0 - &self.mean[t];
            self.m2[t].ger(1.0, &delta, &delta2, 1.0);
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for t in 0..self.mean.len() {
            let delta = &other.mean[t] - &self.mean[t];
            self.m2[t] += &other.m2[t];
            self.m2[t].ger(na * nb / n, &delta, &delta, 1.0);
            self.mean[t].axpy(nb / n, &delta, 1.0);
        }
        self.count += other.count;
    }
}

const CHUNK: usize = 32;

/// Monte Carlo ensemble: `x0 ~ N(init)`, then Euler–Maruyama per path.
pub fn monte_carlo<M: DynamicsModel + ?Sized>(
    model: &M,
    init: &GaussianBelief,
    ctrl: &ControlTrajectory,
    opts: &SimOptions,
) -> Result<EnsembleStats> {
    Ok(monte_carlo_observed(model, init, ctrl, opts, |_, _, _| ())?.0)
}

/// Like [`monte_carlo`], additionally mapping every path (in path order)
/// through `observe(path_id, times, states)`.
pub fn monte_carlo_observed<M, T, F>(
    model: &M,
    init: &GaussianBelief,
    ctrl: &ControlTrajectory,
    opts: &SimOptions,
    observe: F,
) -> Result<(EnsembleStats, Vec<T>)>
where
    M: DynamicsModel + ?Sized,
    T: Send,
    F: Fn(usize, &[f64], &[StateVector]) -> T + Sync,
{
    check_dim("initial belief", model.state_dim(), init.dim())?;
    if opts.n_paths < 2 {
        return Err(Error::InvalidArgument("n_paths must be >= 2".into()));
    }
    if !init.cov.is_psd() {
        return Err(Error::NotPsd {
            time: 0.0,
            min_eig: init.cov.min_eigenvalue(),
        });
    }
    let runner = PathRunner::new(model, ctrl, opts.dt, opts.seed)?;
    let times = simulation_grid(ctrl, opts.dt)?;
    let n = model.state_dim();
    let factor = init.cov.psd_projected().sqrt_factor();

    let chunks: Vec<(usize, usize)> = (0..opts.n_paths)
        .step_by(CHUNK)
        .map(|start| (start, (start + CHUNK).min(opts.n_paths)))
        .collect();
    let partials: Vec<Result<(Accumulator, Vec<T>)>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut acc = Accumulator::new(times.len(), n);
            let mut observed = Vec::with_capacity(end - start);
            let mut xi = vec![0.0; n];
            for path in start..end {
                runner.noise.fill(path as u64, 0, &mut xi);
                let x0 = &init.mean.0 + &factor * DVector::from_column_slice(&xi);
                let states = runner.run(&x0, path as u64)?;
                acc.push(&states);
                observed.push(observe(path, &times, &states));
            }
            Ok((acc, observed))
        })
        .collect();

    let mut total = Accumulator::new(times.len(), n);
    let mut observations = Vec::with_capacity(opts.n_paths);
    for part in partials {
        let (acc, obs) = part?;
        total.merge(&acc);
        observations.extend(obs);
    }
    let denom = (total.count - 1) as f64;
    let stats = EnsembleStats {
        times,
        mean: total.mean.into_iter().map(StateVector).collect(),
        cov: total.m2.into_iter().map(|m| CovarianceMatrix::new_unchecked(m / denom)).collect(),
        sample_count: total.count,
        seed: opts.seed,
    };
    Ok((stats, observations))
}

/// Per-time relative errors `|m_hat - m| / (1 + |m|)` and
/// `|P_hat - P|_F / (1 + |P|_F)` of a belief trajectory against an ensemble.
pub fn relative_errors(stats: &EnsembleStats, traj: &BeliefTrajectory) -> Result<(Vec<f64>, Vec<f64>)> {
    check_grid_match(stats, traj)?;
    let mean_err = stats
        .mean
        .iter()
        .zip(&traj.beliefs)
        .map(|(m, b)| (&b.mean.0 - &m.0).norm() / (1.0 + m.norm()))
        .collect();
    let cov_err = stats
        .cov
        .iter()
        .zip(&traj.beliefs)
        .map(|(p, b)| (b.cov.matrix() - p.matrix()).norm() / (1.0 + p.frobenius()))
        .collect();
    Ok((mean_err, cov_err))
}

pub(crate) fn check_grid_match(stats: &EnsembleStats, traj: &BeliefTrajectory) -> Result<()> {
    if stats.times.len() != traj.times.len() {
        return Err(Error::GridMismatch(format!(
            "ensemble has {} times, trajectory {}",
            stats.times.len(),
            traj.times.len()
        )));
    }
    for (a, b) in stats.times.iter().zip(&traj.times) {
        if (a - b).abs() > 1e-9 * (1.0 + b.abs()) {
            return Err(Error::GridMismatch(format!("time {a} vs {b}")));
        }
    }
    if stats.mean.first().map(|m| m.dim()) != Some(traj.state_dim()) {
        return Err(Error::GridMismatch("state dimensions differ".into()));
    }
    Ok(())
}
