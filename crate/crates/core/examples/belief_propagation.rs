//! Belief propagation on an Ornstein-Uhlenbeck process against its closed
//! form, then on a planar double integrator under constant thrust.

use statlin_plan::dynamics::{ControlTrajectory, ControlVector, CovarianceMatrix, GaussianBelief, LinearModel, StateVector};
use statlin_plan::propagate::propagate;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (a, sigma) = (2.0, 1.0);
    let ou = LinearModel::ornstein_uhlenbeck(a, sigma);
    let init = GaussianBelief::new(StateVector::from([1.0]), CovarianceMatrix::from_diagonal(&[0.5])?)?;
    let ctrl = ControlTrajectory::constant(1.0, 1000, ControlVector::from([0.0]))?;
    let traj = propagate(&ou, &init, &ctrl, 1)?;
    println!("{:>5} {:>12} {:>12} {:>12} {:>12}", "t", "mean", "exact", "var", "exact");
    for k in (0..=1000).step_by(200) {
        let t = traj.times[k];
        let b = &traj.beliefs[k];
        let m = (-a * t).exp();
        let p = 0.5 * (-2.0 * a * t).exp() + sigma * sigma / (2.0 * a) * (1.0 - (-2.0 * a * t).exp());
        println!("{t:5.2} {:12.8} {m:12.8} {:12.8} {p:12.8}", b.mean[0], b.cov[(0, 0)]);
    }

    let di = LinearModel::double_integrator_2d(0.3);
    let init = GaussianBelief::new(StateVector::zeros(4), CovarianceMatrix::from_diagonal(&[1e-2; 4])?)?;
    let push = ControlTrajectory::constant(2.0, 20, ControlVector::from([1.0, -0.5]))?;
    let traj = propagate(&di, &init, &push, 10)?;
    let fin = traj.final_belief();
    println!("double integrator at t = 2: mean {:?}", fin.mean.as_slice());
    println!("                            std  {:?}", fin.cov.std_devs());
    Ok(())
}
