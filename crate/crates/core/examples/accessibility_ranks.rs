//! Lie-bracket rank tests: the Brockett integrator, then the landing model
//! with open-loop controls and with affine state feedback.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statlin_plan::accessibility::{lifted_rank, plain_rank, DEFAULT_TOL_SV};
use statlin_plan::descent::{feedback_rank_samples, random_rank_point, rank_model, reference_rank_controls, ControlMode, RocketParams};
use statlin_plan::dynamics::{ControlLinearModel, ControlVector, StateVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let brockett = Arc::new(ControlLinearModel::brockett(DMatrix::zeros(3, 3)));
    let units = [ControlVector::zeros(2), ControlVector::from([1.0, 0.0]), ControlVector::from([0.0, 1.0])];
    let r = plain_rank(brockett, &StateVector::from([0.3, -0.2, 0.0]), &units, 2, DEFAULT_TOL_SV)?;
    println!("Brockett integrator: plain rank {r} of 3");

    let params = RocketParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_rank_point(&mut rng);
    let open = Arc::new(rank_model(&params, ControlMode::Cartesian)?);
    let controls = reference_rank_controls();
    for depth in 2..=4 {
        let rep = lifted_rank(open.clone(), &x, &controls, depth, DEFAULT_TOL_SV)?;
        println!("open loop, depth {depth}: lifted rank {} of {} ({})", rep.lifted_dim, rep.target_dim, rep.verdict());
    }
    println!("open loop plain rank: {}", plain_rank(open, &x, &controls, 2, DEFAULT_TOL_SV)?);

    let fb = Arc::new(rank_model(&params, ControlMode::Feedback)?);
    let samples = feedback_rank_samples(&mut rng, 30)?;
    let rep = lifted_rank(fb, &x, &samples, 2, DEFAULT_TOL_SV)?;
    println!("feedback, depth 2: lifted rank {} of {} ({})", rep.lifted_dim, rep.target_dim, rep.verdict());
    Ok(())
}
