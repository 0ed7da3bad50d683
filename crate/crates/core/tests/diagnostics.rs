mod common;

use std::sync::Arc;

use nalgebra::dvector;
use pcmpc_core::benchmarks::*;
use pcmpc_core::closed_loop::*;
use pcmpc_core::diagnostics::*;
use pcmpc_core::solver::SolverConfig;
use pcmpc_core::Vector;

use common::LqrInstance;

fn friction_log(x0: Vector, steps: usize, epsilon: f64) -> (Arc<pcmpc_core::model::HorizonProblem>, TrajectoryLog) {
    let problem = Arc::new(friction_problem(&FrictionSetup::default()).unwrap());
    let mut spec = SimulationSpec::new(
        problem.clone(),
        x0,
        steps,
        ControllerKind::PcMpc,
        SolverConfig::new(epsilon, 50).unwrap(),
        0.2,
    );
    spec.record_eigenvalues = true;
    let log = simulate(&spec).unwrap();
    (problem, log)
}

#[test]
fn lqr_lipschitz_estimate_vanishes() {
    let inst = LqrInstance::random(4, 2, 1, 4);
    let problem = Arc::new(inst.problem());
    let spec = SimulationSpec::new(
        problem.clone(),
        dvector![1.0, -1.0],
        10,
        ControllerKind::PcMpc,
        SolverConfig::new(1e-10, 5).unwrap(),
        0.1,
    );
    let log = simulate(&spec).unwrap();
    let est = estimate_constants(&log, &problem, EstimateConfig::default()).unwrap();
    assert!(est.l_hat <= 1e-10, "{}", est.l_hat);
    assert_eq!(est.c_hat, 1.0);
    assert!(est.region.lipschitz_pairs > 0);
}

#[test]
fn friction_constants_are_plausible() {
    let (problem, log) = friction_log(dvector![0.1, 0.1], 30, 1e-4);
    let est = estimate_constants(&log, &problem, EstimateConfig::default()).unwrap();
    assert!(est.m_hat > 0.0 && est.m_hat.is_finite());
    assert!((est.c_hat - 1.0).abs() <= 1e-12);
    assert!(est.l_hat > 0.0 && est.b_hat > 0.0);
    let report = check_bounds(&est, &log, &problem, ReferenceConfig::default()).unwrap();
    assert!(report.delta1 > 0.0 && report.delta2 > 0.0);
    assert_eq!(report.checks.len(), log.iterates.len() - 1);
    assert!(report.corrections_within_bound());
    assert_eq!(report.region, est.region);
}

#[test]
fn static_run_gives_trivial_bounds() {
    let (problem, log) = friction_log(Vector::zeros(2), 10, 1e-4);
    let est = estimate_constants(&log, &problem, EstimateConfig::default()).unwrap();
    assert_eq!(est.b_hat, 0.0);
    let report = check_bounds(&est, &log, &problem, ReferenceConfig::default()).unwrap();
    assert_eq!(report.predicted_n, Some(0.0));
    assert_eq!(report.violations, 0);
    for c in &report.checks {
        // With no motion the bound is the previous iterate's error.
        let prev = log.iterates[c.k - 1].distance(
            &reference_solution(
                &problem,
                &log.states[c.k - 1],
                &log.iterates[c.k - 1],
                ReferenceConfig::default(),
            )
            .unwrap()
            .z,
        );
        assert!((c.bound - prev).abs() <= 1e-15);
    }
}

#[test]
fn reference_solutions_reach_tight_tolerance() {
    let (problem, log) = friction_log(dvector![0.1, 0.1], 5, 1e-4);
    for r in reference_trajectory(&problem, &log, ReferenceConfig::default()).unwrap() {
        assert!(r.grad_norm <= 1e-11, "{}", r.grad_norm);
    }
}

#[test]
fn newton_errors_shrink_from_a_prediction() {
    let (problem, log) = friction_log(dvector![0.1, 0.1], 3, 1e-12);
    let star = reference_solution(&problem, &log.states[1], &log.iterates[1], ReferenceConfig::default()).unwrap();
    let errors = newton_error_sequence(&problem, &log.states[1], &log.seeds[1], &star.z, 3).unwrap();
    assert!(errors.windows(2).all(|w| w[1] <= w[0] || w[1] <= 1e-12), "{errors:?}");
    assert!(errors[3] <= 1e-11);
}
