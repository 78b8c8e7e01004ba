//! Euler-Maruyama ensemble on the open-loop landing model under a hover
//! schedule, compared node by node with the propagated belief.

use statlin_plan::descent::{ControlMode, ScenarioConfig};
use statlin_plan::dynamics::{ControlTrajectory, ControlVector};
use statlin_plan::propagate::propagate;
use statlin_plan::simulate::{monte_carlo, relative_errors, SimOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::default();
    let model = cfg.model(ControlMode::Polar)?;
    let init = cfg.initial_belief()?;
    // Full upward thrust for ten seconds.
    let ctrl = ControlTrajectory::constant(10.0, 50, ControlVector::from([cfg.rocket.u_max, 0.0]))?;
    let traj = propagate(&model, &init, &ctrl, 1)?;
    let opts = SimOptions::for_control(&ctrl, 1000, 42);
    let stats = monte_carlo(&model, &init, &ctrl, &opts)?.restrict_to(&traj.times)?;
    let (em, ec) = relative_errors(&stats, &traj)?;
    for k in (0..traj.len()).step_by(10) {
        println!("t = {:5.1}  rel err mean {:.2e}  cov {:.2e}", traj.times[k], em[k], ec[k]);
    }
    let sd_mc = stats.cov.last().unwrap().std_devs();
    let sd_sl = traj.final_belief().cov.std_devs();
    println!("final position std: statlin ({:.2}, {:.2}) m, Monte Carlo ({:.2}, {:.2}) m", sd_sl[0], sd_sl[1], sd_mc[0], sd_mc[1]);
    Ok(())
}
