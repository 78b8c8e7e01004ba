//! Open-loop robust landing: thrust norm and direction per node, free final
//! time, covariance penalties from the reference scenario.

use statlin_plan::descent::{build_problem4, classify_norm_profile, ScenarioConfig};
use statlin_plan::ocp::{solve, transcribe, SolveOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let cfg = ScenarioConfig::default();
    let nlp = transcribe(build_problem4(&cfg)?, 150)?;
    let start = std::time::Instant::now();
    let opts = SolveOptions::default();
    let report = solve(&nlp, &opts)?;
    println!("status {:?} after {} iterations ({:.1?})", report.status, report.iterations, start.elapsed());
    println!("tf = {:.2} s, fuel left = {:.0} kg", report.tf, -report.breakdown.terminal_mean);
    let traj = nlp.belief_trajectory(&report.decision_vector())?;
    let std = traj.final_belief().cov.std_devs();
    println!("final std: y {:.1} m, z {:.1} m, vy {:.2} m/s, vz {:.2} m/s", std[0], std[1], std[2], std[3]);
    let norms: Vec<f64> = report.controls.iter().map(|u| u[0]).collect();
    let profile = classify_norm_profile(&norms, cfg.rocket.u_min, cfg.rocket.u_max, 1e-3);
    println!("thrust profile: {}", profile.pattern);
    Ok(())
}
