//! Approximation-error functional for an open-loop landing solution next to
//! the error actually observed against a Monte Carlo ensemble.

use statlin_plan::cli::bound_report;
use statlin_plan::descent::{build_problem4, ControlMode, ScenarioConfig};
use statlin_plan::ocp::{solve, transcribe, SolveOptions};
use statlin_plan::simulate::{monte_carlo, SimOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::default();
    let nlp = transcribe(build_problem4(&cfg)?, 150)?;
    let report = solve(&nlp, &SolveOptions::default())?;
    let z = report.decision_vector();
    let ctrl = nlp.control_trajectory(&z)?;
    let traj = nlp.belief_trajectory(&z)?;
    let model = cfg.model(ControlMode::Polar)?;
    let stats = monte_carlo(&model, &cfg.initial_belief()?, &ctrl, &SimOptions::for_control(&ctrl, 1000, 42))?;
    let b = bound_report(&model, &ctrl, &traj, &stats, 1.0)?;
    println!("Jacobian envelope along the mean: {:.3}", b.jacobian_envelope);
    println!("constraint value: {:.3e} (eps = 1: {})", b.constraint_lhs, if b.inside { "inside" } else { "outside" });
    println!(
        "observed: sup |m - m_hat|^2 = {:.3e}, sup |P - P_hat|_F = {:.3e} (MC standard errors {:.1e}, {:.1e})",
        b.sup_mean_err_sq, b.sup_cov_err, b.mc_standard_error_mean_sq, b.mc_standard_error_cov
    );
    println!("bound holds: {}", b.bound_holds);
    Ok(())
}
