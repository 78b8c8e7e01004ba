//! Feedback landing with smoothly saturated thrust. The solve starts from
//! the chance-constrained optimum, which sits off the saturation plateau.

use statlin_plan::descent::{solve_scenario, Scenario, ScenarioConfig};
use statlin_plan::ocp::SolveOptions;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let cfg = ScenarioConfig::default();
    let start = std::time::Instant::now();
    let run = solve_scenario(&cfg, Scenario::Problem5, 150, 1, &SolveOptions::default(), true)?;
    if let Some(seed) = &run.seed {
        println!("seed solve: tf = {:.2} s ({:?})", seed.tf, seed.status);
    }
    let r = &run.report;
    println!("status {:?} after {} iterations ({:.1?})", r.status, r.iterations, start.elapsed());
    let traj = run.nlp.belief_trajectory(&r.decision_vector())?;
    let sd = traj.final_belief().cov.std_devs();
    let norm = sd[..4].iter().map(|s| s * s).sum::<f64>().sqrt();
    println!("tf = {:.2} s, final std {:?}, norm {:.3}", r.tf, &sd[..4], norm);
    Ok(())
}
