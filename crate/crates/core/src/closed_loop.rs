//! Plant/controller feedback loop.
//!
//! Input `u(0)` comes from the cold start. For `k >= 1` the controller
//! refreshes its iterate at the newly observed `x(k)` and applies the first
//! input block. Reports are indexed by the time step whose input they
//! produced; `reports[0]` summarises the cold start.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kkt::{eval_kkt, DecisionVector};
use crate::model::{check_dims, HorizonProblem, PlantModel};
use crate::solver::{ColdStartReport, Solver, SolverConfig, StepReport};
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    /// Prediction step plus corrections.
    PcMpc,
    /// Shift warm start plus Newton corrections.
    NMpc,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::PcMpc => "pcmpc",
            ControllerKind::NMpc => "nmpc",
        }
    }

    /// Inversions the report arithmetic predicts for a step with
    /// `corrections` correction steps.
    pub fn expected_inversions(self, corrections: usize) -> usize {
        match self {
            ControllerKind::PcMpc => corrections + 1,
            ControllerKind::NMpc => corrections,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub problem: Arc<HorizonProblem>,
    /// Plant that advances the real state; usually the problem's own plant.
    pub true_plant: Arc<dyn PlantModel>,
    pub x0: Vector,
    pub steps: usize,
    pub controller: ControllerKind,
    pub config: SolverConfig,
    /// Seed that produced `x0` when it was sampled; carried for provenance.
    pub seed: u64,
    /// Control interval, used for the time axis.
    pub sampling_time: f64,
    /// Record `min |eig(grad_zz L)|` at every applied iterate.
    pub record_eigenvalues: bool,
}

impl SimulationSpec {
    pub fn new(
        problem: Arc<HorizonProblem>,
        x0: Vector,
        steps: usize,
        controller: ControllerKind,
        config: SolverConfig,
        sampling_time: f64,
    ) -> Self {
        let true_plant = problem.plant.clone();
        Self {
            problem,
            true_plant,
            x0,
            steps,
            controller,
            config,
            seed: 0,
            sampling_time,
            record_eigenvalues: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        check_dims("initial state", &self.x0, self.problem.state_dim())?;
        if self.true_plant.state_dim() != self.problem.state_dim()
            || self.true_plant.input_dim() != self.problem.input_dim()
        {
            return Err(Error::Layout("true plant dimensions differ from the problem's".into()));
        }
        self.config.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub controller: ControllerKind,
    pub sampling_time: f64,
    /// `steps + 1` states (fewer if the run aborted).
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub reports: Vec<StepReport>,
    /// `||grad_z L(x(k), z_k)||` of the iterate whose first input was applied.
    pub grad_norm_at_applied_input: Vec<f64>,
    pub min_abs_hessian_eigenvalue: Option<Vec<f64>>,
    /// Iterate `z_k` whose first block became `u(k)`.
    pub iterates: Vec<DecisionVector>,
    /// Seed entering the correction loop at each step (`seeds[0]` is the
    /// cold-start rollout guess).
    pub seeds: Vec<DecisionVector>,
    pub cold_start: ColdStartReport,
    /// Inversions over steps `k >= 1`, summed from the reports.
    pub total_inversions: u64,
    /// Same quantity from the solver's counter.
    pub counted_inversions: u64,
    pub gauss_newton: bool,
    pub jitter: Option<f64>,
    pub wall_time: Duration,
}

impl TrajectoryLog {
    /// Reports of the online steps (excluding the cold start).
    pub fn online_reports(&self) -> &[StepReport] {
        self.reports.get(1..).unwrap_or(&[])
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("log holds at least the initial state")
    }

    /// Does every online report satisfy the inversion identity of its
    /// controller, and does the counter agree with the reports?
    pub fn accounting_consistent(&self) -> bool {
        let per_step = self
            .online_reports()
            .iter()
            .all(|r| r.hessian_inversions == self.controller.expected_inversions(r.corrections_used));
        let summed: u64 = self.online_reports().iter().map(|r| r.hessian_inversions as u64).sum();
        per_step && summed == self.total_inversions && self.total_inversions == self.counted_inversions
    }

    /// Re-integrate the logged inputs through `plant` and compare.
    pub fn replays_exactly(&self, plant: &dyn PlantModel) -> Result<bool> {
        let mut x = self.states[0].clone();
        for (k, u) in self.inputs.iter().enumerate() {
            x = plant.step(&x, u)?;
            if x != self.states[k + 1] {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// A failed run with whatever was logged before the failure.
#[derive(Debug, thiserror::Error)]
#[error("simulation aborted at step {step}: {source}")]
pub struct SimulationError {
    pub step: usize,
    #[source]
    pub source: Error,
    pub partial: Option<Box<TrajectoryLog>>,
}

fn min_abs_eigenvalue(problem: &HorizonProblem, x: &Vector, z: &DecisionVector) -> Result<f64> {
    let sys = eval_kkt(problem, x, z)?;
    let eig = nalgebra::SymmetricEigen::new(sys.hess_zz);
    Ok(eig.eigenvalues.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min))
}

/// Run one closed-loop simulation.
pub fn simulate(spec: &SimulationSpec) -> Result<TrajectoryLog, SimulationError> {
    let fail = |step: usize, source: Error, partial: Option<TrajectoryLog>| SimulationError {
        step,
        source,
        partial: partial.map(Box::new),
    };
    spec.validate().map_err(|e| fail(0, e, None))?;

    let started = Instant::now();
    let problem = spec.problem.as_ref();
    let solver = Solver::new(problem, spec.config).map_err(|e| fail(0, e, None))?;
    let seed0 = solver.rollout_guess(&spec.x0).map_err(|e| fail(0, e, None))?;
    let (z0, cold) = solver.cold_start(&spec.x0).map_err(|e| fail(0, e, None))?;
    let online_start = solver.counter().get();

    let mut log = TrajectoryLog {
        controller: spec.controller,
        sampling_time: spec.sampling_time,
        states: vec![spec.x0.clone()],
        inputs: Vec::with_capacity(spec.steps),
        reports: Vec::with_capacity(spec.steps),
        grad_norm_at_applied_input: Vec::with_capacity(spec.steps),
        min_abs_hessian_eigenvalue: spec.record_eigenvalues.then(Vec::new),
        iterates: Vec::with_capacity(spec.steps),
        seeds: Vec::with_capacity(spec.steps),
        cold_start: cold,
        total_inversions: 0,
        counted_inversions: 0,
        gauss_newton: false,
        jitter: spec.config.jitter,
        wall_time: Duration::ZERO,
    };

    let gauss_newton = eval_kkt(problem, &spec.x0, &z0)
        .map(|s| s.gauss_newton)
        .map_err(|e| fail(0, e, None))?;
    log.gauss_newton = gauss_newton;

    let guess_norm = solver.grad_norm(&spec.x0, &seed0).map_err(|e| fail(0, e, None))?;
    let mut z = z0;
    let mut input = z.input(0);
    let mut report = StepReport {
        corrections_used: cold.iterations,
        hessian_inversions: cold.hessian_inversions,
        grad_norm_initial: guess_norm,
        grad_norm_after_prediction: guess_norm,
        grad_norm_final: cold.grad_norm,
        converged: true,
    };
    let mut seed = seed0;

    for k in 0..spec.steps {
        let x_k = log.states[k].clone();
        if k > 0 {
            let x_prev = &log.states[k - 1];
            let step = match spec.controller {
                ControllerKind::PcMpc => solver.pc_mpc_step(x_prev, &x_k, &z),
                ControllerKind::NMpc => solver.n_mpc_step(&x_k, &z),
            };
            let step = match step {
                Ok(s) => s,
                Err(e) => {
                    log.counted_inversions = solver.counter().get() - online_start;
                    log.wall_time = started.elapsed();
                    return Err(fail(k, e, Some(log)));
                }
            };
            input = step.input;
            z = step.iterate;
            seed = step.seed;
            report = step.report;
            log.total_inversions += report.hessian_inversions as u64;
        }
        if let Some(eigs) = log.min_abs_hessian_eigenvalue.as_mut() {
            match min_abs_eigenvalue(problem, &x_k, &z) {
                Ok(v) => eigs.push(v),
                Err(e) => return Err(fail(k, e, Some(log))),
            }
        }
        let next = match spec.true_plant.step(&x_k, &input) {
            Ok(x) => x,
            Err(e) => return Err(fail(k, e, Some(log))),
        };
        log.grad_norm_at_applied_input.push(report.grad_norm_final);
        log.reports.push(report);
        log.inputs.push(input.clone());
        log.iterates.push(z.clone());
        log.seeds.push(seed.clone());
        log.states.push(next);
    }

    log.counted_inversions = solver.counter().get() - online_start;
    log.wall_time = started.elapsed();
    Ok(log)
}

/// Distribution summary of per-run totals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug)]
pub struct BatchResult {
    pub runs: Vec<Result<TrajectoryLog, SimulationError>>,
    /// Total online inversions per successful run.
    pub inversions: Option<Summary>,
    pub failures: usize,
}

/// Run independent simulations, in parallel when `jobs` allows, keeping the
/// output order of `specs`. Failures are recorded and the batch continues.
pub fn run_batch(specs: &[SimulationSpec], jobs: Option<usize>) -> BatchResult {
    let run_all = || specs.par_iter().map(simulate).collect::<Vec<_>>();
    let runs = match jobs {
        Some(j) => match rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build() {
            Ok(pool) => pool.install(run_all),
            Err(_) => specs.iter().map(simulate).collect(),
        },
        None => run_all(),
    };
    let totals: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.as_ref().ok())
        .map(|log| log.total_inversions as f64)
        .collect();
    let failures = runs.iter().filter(|r| r.is_err()).count();
    BatchResult {
        inversions: Summary::of(&totals),
        runs,
        failures,
    }
}

/// Draw `count` initial states `x_ref * (1 + perturbation * xi)` with
/// `xi ~ N(0, I)` from a ChaCha20 stream seeded by `seed`. Components listed
/// in `floors` are clipped from below to keep the model in its domain.
pub fn sample_initial_states(
    x_ref: &Vector,
    perturbation: f64,
    count: usize,
    seed: u64,
    floors: &[(usize, f64)],
) -> Vec<Vector> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut x = x_ref.map(|v| {
                let xi: f64 = StandardNormal.sample(&mut rng);
                v * (1.0 + perturbation * xi)
            });
            for &(i, floor) in floors {
                if x[i] < floor {
                    x[i] = floor;
                }
            }
            x
        })
        .collect()
}

/// Largest componentwise gap between two state sequences.
pub fn sup_norm_difference(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}
