use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use statlin_plan::accessibility::{lie_bracket, lifted_rank, plain_rank, VectorFieldHandle, DEFAULT_TOL_SV};
use statlin_plan::descent::{rank_model, reference_rank_controls, smooth_sat, ControlMode, ScenarioConfig};
use statlin_plan::dynamics::{ControlTrajectory, ControlVector, CovarianceMatrix, DynamicsModel, GaussianBelief, LinearModel, StateVector};
use statlin_plan::ocp::inverse_normal_cdf;
use statlin_plan::propagate::{propagate, BeliefTrajectory};
use statlin_plan::simulate::{monte_carlo_observed, SimOptions};
use statrs::distribution::{ContinuousCDF, Normal};

fn min_eig_ok(traj: &BeliefTrajectory) -> Result<(), TestCaseError> {
    for (t, b) in traj.times.iter().zip(&traj.beliefs) {
        let p = b.cov.matrix();
        let floor = -1e-8 * (1.0 + p.trace());
        let e = b.cov.min_eigenvalue();
        prop_assert!(e >= floor, "min eigenvalue {e:e} at t = {t}");
    }
    Ok(())
}

fn polar_schedule() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.2..0.8f64, 0.0..std::f64::consts::PI), 20)
}

fn feedback_schedule() -> impl Strategy<Value = Vec<Vec<f64>>> {
    let node = (0.2..0.8f64, 0.0..std::f64::consts::PI, prop::collection::vec(-1e-3..1e-3f64, 8)).prop_map(|(r, th, k)| {
        let mut v = vec![r, th];
        v.extend(k);
        v
    });
    prop::collection::vec(node, 20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn open_loop_landing_keeps_covariance_psd(schedule in polar_schedule()) {
        let cfg = ScenarioConfig::default();
        let model = cfg.model(ControlMode::Polar).unwrap();
        let values = schedule.iter().map(|&(r, th)| ControlVector::from([r, th])).collect();
        let ctrl = ControlTrajectory::uniform(20.0, values).unwrap();
        let traj = propagate(&model, &cfg.initial_belief().unwrap(), &ctrl, 2).unwrap();
        min_eig_ok(&traj)?;
    }

    #[test]
    fn feedback_landing_keeps_covariance_psd(schedule in feedback_schedule()) {
        let cfg = ScenarioConfig::default();
        let model = cfg.model(ControlMode::SaturatedFeedback { eps: cfg.saturation_eps }).unwrap();
        let values = schedule.into_iter().map(ControlVector::from).collect();
        let ctrl = ControlTrajectory::uniform(20.0, values).unwrap();
        let traj = propagate(&model, &cfg.initial_belief().unwrap(), &ctrl, 2).unwrap();
        min_eig_ok(&traj)?;
    }

    #[test]
    fn mass_never_increases(schedule in polar_schedule()) {
        let cfg = ScenarioConfig::default();
        let model = cfg.model(ControlMode::Polar).unwrap();
        let values = schedule.iter().map(|&(r, th)| ControlVector::from([r, th])).collect();
        let ctrl = ControlTrajectory::uniform(20.0, values).unwrap();
        let init = cfg.initial_belief().unwrap();
        let traj = propagate(&model, &init, &ctrl, 1).unwrap();
        for w in traj.beliefs.windows(2) {
            prop_assert!(w[1].mean[4] <= w[0].mean[4]);
        }
        let opts = SimOptions::for_control(&ctrl, 8, 11);
        let (_, ok) = monte_carlo_observed(&model, &init, &ctrl, &opts, |_, _, states| {
            states.windows(2).all(|w| w[1][4] <= w[0][4])
        }).unwrap();
        prop_assert!(ok.into_iter().all(|b| b));
    }

    #[test]
    fn mean_ignores_initial_covariance(schedule in polar_schedule(), scale in 0.0..50.0f64, shear in -0.9..0.9f64) {
        let cfg = ScenarioConfig::default();
        let model = cfg.model(ControlMode::Polar).unwrap();
        let values = schedule.iter().map(|&(r, th)| ControlVector::from([r, th])).collect();
        let ctrl = ControlTrajectory::uniform(20.0, values).unwrap();
        let base = cfg.initial_belief().unwrap();
        let mut p = base.cov.matrix() * scale;
        p[(0, 1)] = shear * (p[(0, 0)] * p[(1, 1)]).sqrt();
        p[(1, 0)] = p[(0, 1)];
        let other = GaussianBelief::new(base.mean.clone(), CovarianceMatrix::new(p).unwrap()).unwrap();
        let a = propagate(&model, &base, &ctrl, 1).unwrap();
        let b = propagate(&model, &other, &ctrl, 1).unwrap();
        for (x, y) in a.beliefs.iter().zip(&b.beliefs) {
            prop_assert_eq!(x.mean.as_slice(), y.mean.as_slice());
        }
    }

    #[test]
    fn rk4_error_shrinks_sixteenfold(a in 0.5..3.0f64, sigma in 0.1..2.0f64, m0 in -2.0..2.0f64, p0 in 0.0..2.0f64) {
        let model = LinearModel::ornstein_uhlenbeck(a, sigma);
        let init = GaussianBelief::new(StateVector::from([m0]), CovarianceMatrix::from_diagonal(&[p0]).unwrap()).unwrap();
        let exact_m = m0 * (-a).exp();
        let exact_p = p0 * (-2.0 * a).exp() + sigma * sigma / (2.0 * a) * (1.0 - (-2.0 * a).exp());
        let err = |n: usize| {
            let ctrl = ControlTrajectory::constant(1.0, n, ControlVector::zeros(1)).unwrap();
            let b = propagate(&model, &init, &ctrl, 1).unwrap().final_belief().clone();
            (b.mean[0] - exact_m).abs() + (b.cov[(0, 0)] - exact_p).abs()
        };
        let steps = [10usize, 20, 40, 80, 160];
        let errs: Vec<f64> = steps.iter().map(|&n| err(n)).collect();
        // Observed order over the decade, ignoring points lost in roundoff.
        let pts: Vec<(f64, f64)> = steps.iter().zip(&errs).filter(|(_, e)| **e > 1e-11).map(|(n, e)| (-(*n as f64).ln(), e.ln())).collect();
        prop_assume!(pts.len() >= 3);
        let order = statlin_plan::bounds::log_log_slope(&pts.iter().map(|p| p.0.exp()).collect::<Vec<_>>(), &pts.iter().map(|p| p.1.exp()).collect::<Vec<_>>());
        prop_assert!((3.7..4.5).contains(&order), "observed order {order} from {errs:?}");
        let last = errs[pts.len() - 2] / errs[pts.len() - 1];
        prop_assert!((14.0..19.0).contains(&last), "final halving ratio {last}");
    }

    #[test]
    fn smooth_sat_stays_near_clamp(s in -2.0..3.0f64, lo in 0.0..0.5f64, width in 0.1..1.0f64, eps in 0.0..0.3f64) {
        let hi = lo + width;
        let v = smooth_sat(s, lo, hi, eps).unwrap();
        prop_assert!(v >= lo - eps && v <= hi + eps);
        prop_assert!((v - s.clamp(lo, hi)).abs() <= eps + 1e-12);
    }

    #[test]
    fn quantile_inverts_normal_cdf(p in 0.001..0.999f64) {
        let q = inverse_normal_cdf(p).unwrap();
        let n = Normal::standard();
        prop_assert!((n.cdf(q) - p).abs() < 1e-12);
        prop_assert!((inverse_normal_cdf(1.0 - p).unwrap() + q).abs() < 1e-9);
    }

    #[test]
    fn brackets_are_antisymmetric_and_satisfy_jacobi(c in prop::collection::vec(-1.0..1.0f64, 9), x in prop::collection::vec(-1.0..1.0f64, 3)) {
        let fields = [quadratic_field(&c[0..3]), quadratic_field(&c[3..6]), quadratic_field(&c[6..9])];
        let x = DVector::from_vec(x);
        let fg = lie_bracket(&fields[0], &fields[1], &x).unwrap();
        let gf = lie_bracket(&fields[1], &fields[0], &x).unwrap();
        prop_assert!((&fg + &gf).norm() <= 1e-12 * (1.0 + fg.norm()));
        let [f, g, h] = &fields;
        let jacobi = lie_bracket(f, &g.bracket(h).unwrap(), &x).unwrap()
            + lie_bracket(g, &h.bracket(f).unwrap(), &x).unwrap()
            + lie_bracket(h, &f.bracket(g).unwrap(), &x).unwrap();
        prop_assert!(jacobi.norm() < 1e-6, "Jacobi residual {}", jacobi.norm());
    }
}

/// `f(x) = (c0 x1 x2 + x0, c1 x0^2 - x2, c2 x0 x1)`, with exact Jacobian.
fn quadratic_field(c: &[f64]) -> VectorFieldHandle {
    let (a, b, d) = (c[0], c[1], c[2]);
    VectorFieldHandle::new(3, "quad", move |x| Ok(DVector::from_vec(vec![a * x[1] * x[2] + x[0], b * x[0] * x[0] - x[2], d * x[0] * x[1]])))
        .with_jacobian(move |x| {
            Ok(DMatrix::from_row_slice(
                3,
                3,
                &[1.0, a * x[2], a * x[1], 2.0 * b * x[0], 0.0, -1.0, d * x[1], d * x[0], 0.0],
            ))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rank_grows_with_depth_and_samples(y in -1.0..1.0f64, z in -1.0..1.0f64, vy in -2.0..2.0f64, vz in -2.0..2.0f64, mu in 0.25..1.0f64) {
        let model = Arc::new(rank_model(&ScenarioConfig::default().rocket, ControlMode::Cartesian).unwrap());
        let x = StateVector::from([y, z, vy, vz, mu]);
        let controls = reference_rank_controls();
        let r2 = lifted_rank(model.clone(), &x, &controls, 2, DEFAULT_TOL_SV).unwrap().lifted_dim;
        let r3 = lifted_rank(model.clone(), &x, &controls, 3, DEFAULT_TOL_SV).unwrap().lifted_dim;
        let few = lifted_rank(model.clone(), &x, &controls[..3], 3, DEFAULT_TOL_SV).unwrap().lifted_dim;
        prop_assert!(r2 <= r3 && few <= r3);
        let p2 = plain_rank(model.clone(), &x, &controls[..2], 2, DEFAULT_TOL_SV).unwrap();
        let p4 = plain_rank(model, &x, &controls, 2, DEFAULT_TOL_SV).unwrap();
        prop_assert!(p2 <= p4);
    }
}

#[test]
fn smooth_sat_converges_as_smoothing_vanishes() {
    let (a, b) = (0.2, 0.8);
    let sup_err = |eps: f64| {
        (0..=2000)
            .map(|i| -0.5 + 2.0 * i as f64 / 2000.0)
            .map(|s| (smooth_sat(s, a, b, eps).unwrap() - s.clamp(a, b)).abs())
            .fold(0.0, f64::max)
    };
    let errs = [sup_err(0.2), sup_err(0.1), sup_err(0.01)];
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    assert!(errs[2] < 0.01);
}

#[test]
fn quantile_at_ninety_nine_percent() {
    assert!((inverse_normal_cdf(0.99).unwrap() - 2.326_347_874_0).abs() < 1e-8);
}

#[test]
fn linear_model_dimensions_are_consistent() {
    let m = LinearModel::double_integrator_2d(0.5);
    assert_eq!((m.state_dim(), m.control_dim(), m.noise_dim()), (4, 2, 2));
}
