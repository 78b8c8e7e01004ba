//! Feedback landing with exact saturation replaced by chance constraints on
//! the thrust norm at the 0.99 level.

use statlin_plan::descent::{solve_scenario, Scenario, ScenarioConfig};
use statlin_plan::ocp::SolveOptions;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let cfg = ScenarioConfig::default();
    let start = std::time::Instant::now();
    let run = solve_scenario(&cfg, Scenario::Problem6, 150, 1, &SolveOptions::default(), false)?;
    let r = &run.report;
    println!("status {:?} after {} iterations ({:.1?})", r.status, r.iterations, start.elapsed());
    println!("tf = {:.2} s, terminal residual {:.1e}, path violation {:.1e}", r.tf, r.eq_violation, r.ineq_violation);
    let traj = run.nlp.belief_trajectory(&r.decision_vector())?;
    let sd = traj.final_belief().cov.std_devs();
    println!("final std: y {:.2} m, z {:.2} m, vy {:.3} m/s, vz {:.3} m/s", sd[0], sd[1], sd[2], sd[3]);
    Ok(())
}
