//! Prediction and correction steps and the two receding-horizon controllers.
//!
//! Every dense KKT solve goes through [`solve_kkt`] and is billed on the
//! solver's [`InversionCounter`], so the report arithmetic can be checked
//! against an independent tally.

use serde::{Deserialize, Serialize};

use crate::kkt::{eval_gradient, eval_kkt, regularized, solve_kkt, DecisionVector, InversionCounter, Layout};
use crate::model::{check_dims, HorizonProblem};
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColdStartConfig {
    pub max_iters: usize,
    pub armijo_c: f64,
    pub backtrack_ratio: f64,
    /// Defaults to the controller's `epsilon` when unset.
    pub epsilon_cold: Option<f64>,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            armijo_c: 1e-4,
            backtrack_ratio: 0.5,
            epsilon_cold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Target Euclidean norm of `grad_z L`.
    pub epsilon: f64,
    /// Maximum corrections per control interval.
    pub n_max: usize,
    pub cold_start: ColdStartConfig,
    /// Diagonal shift added to every KKT matrix. Exploratory only.
    pub jitter: Option<f64>,
}

impl SolverConfig {
    pub fn new(epsilon: f64, n_max: usize) -> Result<Self> {
        let cfg = Self {
            epsilon,
            n_max,
            cold_start: ColdStartConfig::default(),
            jitter: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.n_max == 0 {
            return Err(Error::InvalidParameter("n_max must be at least 1".into()));
        }
        let cs = &self.cold_start;
        if !(cs.backtrack_ratio > 0.0 && cs.backtrack_ratio < 1.0) {
            return Err(Error::InvalidParameter("backtrack_ratio must lie in (0, 1)".into()));
        }
        if !(cs.armijo_c > 0.0 && cs.armijo_c < 0.5) {
            return Err(Error::InvalidParameter("armijo_c must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn epsilon_cold(&self) -> f64 {
        self.cold_start.epsilon_cold.unwrap_or(self.epsilon)
    }
}

/// Work done in one control interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub corrections_used: usize,
    /// Prediction solves plus correction solves.
    pub hessian_inversions: usize,
    /// `||grad L||` at the new state and the previous iterate.
    pub grad_norm_initial: f64,
    /// `||grad L||` at the seed handed to the correction loop (the prediction
    /// for PC-MPC, the shifted iterate for N-MPC).
    pub grad_norm_after_prediction: f64,
    pub grad_norm_final: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub iterations: usize,
    pub hessian_inversions: usize,
    pub grad_norm: f64,
    /// Number of iterations that needed backtracking.
    pub damped_iterations: usize,
}

/// Output of one controller step.
#[derive(Debug, Clone)]
pub struct ControlStep {
    /// First input block of the new iterate.
    pub input: Vector,
    pub iterate: DecisionVector,
    /// Seed that entered the correction loop.
    pub seed: DecisionVector,
    pub report: StepReport,
}

/// Newton machinery bound to one problem and one inversion counter.
#[derive(Debug, Clone)]
pub struct Solver<'a> {
    problem: &'a HorizonProblem,
    config: SolverConfig,
    counter: InversionCounter,
}

impl<'a> Solver<'a> {
    pub fn new(problem: &'a HorizonProblem, config: SolverConfig) -> Result<Self> {
        Self::with_counter(problem, config, InversionCounter::new())
    }

    pub fn with_counter(problem: &'a HorizonProblem, config: SolverConfig, counter: InversionCounter) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            problem,
            config,
            counter,
        })
    }

    pub fn problem(&self) -> &HorizonProblem {
        self.problem
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn counter(&self) -> &InversionCounter {
        &self.counter
    }

    pub fn layout(&self) -> Layout {
        Layout::of(self.problem)
    }

    pub fn grad_norm(&self, x: &Vector, z: &DecisionVector) -> Result<f64> {
        Ok(eval_gradient(self.problem, x, z)?.norm())
    }

    /// `z_k - (grad_zz L)^{-1} grad_zx L (x_next - x_k)`, one KKT solve.
    pub fn predict(&self, x_k: &Vector, x_next: &Vector, z_k: &DecisionVector) -> Result<DecisionVector> {
        check_dims("next state", x_next, self.problem.state_dim())?;
        let sys = eval_kkt(self.problem, x_k, z_k)?;
        let rhs = &sys.hess_zx * (x_next - x_k);
        let hess = regularized(&sys.hess_zz, self.config.jitter);
        let sol = solve_kkt(&hess, &rhs, &self.counter)?;
        Ok(z_k.minus(&sol.solution))
    }

    /// One unit Newton step on `grad_z L(x_now, .) = 0`.
    pub fn correct(&self, x_now: &Vector, z: &DecisionVector) -> Result<DecisionVector> {
        let sys = eval_kkt(self.problem, x_now, z)?;
        let hess = regularized(&sys.hess_zz, self.config.jitter);
        let sol = solve_kkt(&hess, &sys.grad, &self.counter)?;
        Ok(z.minus(&sol.solution))
    }

    /// Correct while `||grad L|| > epsilon` and fewer than `n_max`
    /// corrections have been taken.
    pub fn correct_until(&self, x_now: &Vector, z0: DecisionVector) -> Result<(DecisionVector, StepReport)> {
        self.correct_to(x_now, z0, self.config.epsilon, self.config.n_max)
    }

    /// [`correct_until`](Self::correct_until) with an explicit tolerance and cap.
    pub fn correct_to(
        &self,
        x_now: &Vector,
        z0: DecisionVector,
        epsilon: f64,
        n_max: usize,
    ) -> Result<(DecisionVector, StepReport)> {
        let initial = self.grad_norm(x_now, &z0)?;
        let mut norm = initial;
        let mut z = z0;
        let mut j = 0;
        while norm > epsilon && j < n_max {
            let next = self.correct(x_now, &z)?;
            j += 1;
            let diverged = |reason: String, last: &DecisionVector| Error::Diverged {
                last_finite: Box::new(last.clone()),
                corrections: j,
                reason,
            };
            if !next.is_finite() {
                return Err(diverged("non-finite iterate".into(), &z));
            }
            norm = match self.grad_norm(x_now, &next) {
                Ok(v) if v.is_finite() => v,
                Ok(_) => return Err(diverged("non-finite gradient".into(), &z)),
                Err(e @ (Error::NonFinite { .. } | Error::Domain(_))) => return Err(diverged(e.to_string(), &z)),
                Err(e) => return Err(e),
            };
            z = next;
        }
        Ok((
            z,
            StepReport {
                corrections_used: j,
                hessian_inversions: j,
                grad_norm_initial: initial,
                grad_norm_after_prediction: initial,
                grad_norm_final: norm,
                converged: norm <= epsilon,
            },
        ))
    }

    /// Initial guess for the cold start: roll the plant out under the
    /// problem's input hint, zero multipliers.
    pub fn rollout_guess(&self, x0: &Vector) -> Result<DecisionVector> {
        let layout = self.layout();
        let hint = &self.problem.input_hint;
        let xbar = self.problem.rollout(x0, hint)?;
        let ubar = vec![hint.clone(); layout.horizon];
        let lambda = vec![Vector::zeros(layout.n); layout.horizon + 1];
        DecisionVector::pack(layout, &xbar, &ubar, &lambda)
    }

    /// Offline solve of the first problem: damped Newton on `||grad L||^2`
    /// from the rollout guess.
    pub fn cold_start(&self, x0: &Vector) -> Result<(DecisionVector, ColdStartReport)> {
        check_dims("initial state", x0, self.problem.state_dim())?;
        let cs = self.config.cold_start;
        let tol = self.config.epsilon_cold();
        let start = self.counter.get();
        let mut z = self.rollout_guess(x0)?;
        let mut norm = self.grad_norm(x0, &z)?;
        let mut iterations = 0;
        let mut damped = 0;

        while norm > tol && iterations < cs.max_iters {
            let sys = eval_kkt(self.problem, x0, &z)?;
            let hess = regularized(&sys.hess_zz, self.config.jitter);
            let dir = solve_kkt(&hess, &sys.grad, &self.counter)?.solution;
            iterations += 1;

            // Merit phi = ||g||^2; the Newton direction has slope -2 ||g||^2.
            let merit = norm * norm;
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial = z.minus(&(&dir * alpha));
                if let Ok(trial_norm) = self.grad_norm(x0, &trial) {
                    let sufficient = trial_norm * trial_norm <= merit * (1.0 - 2.0 * cs.armijo_c * alpha);
                    if trial_norm.is_finite() && (sufficient || (alpha == 1.0 && trial_norm < norm)) {
                        accepted = Some((trial, trial_norm));
                        break;
                    }
                }
                alpha *= cs.backtrack_ratio;
            }
            if alpha < 1.0 {
                damped += 1;
            }
            match accepted {
                Some((next, next_norm)) => {
                    z = next;
                    norm = next_norm;
                }
                None => break,
            }
        }

        let report = ColdStartReport {
            iterations,
            hessian_inversions: (self.counter.get() - start) as usize,
            grad_norm: norm,
            damped_iterations: damped,
        };
        if norm > tol {
            return Err(Error::ColdStartFailed {
                best: Box::new(z),
                grad_norm: norm,
                iterations,
            });
        }
        Ok((z, report))
    }

    /// One prediction-correction interval: predict from `(x_k, z_k)` to
    /// `x_next`, then correct at `x_next`.
    pub fn pc_mpc_step(&self, x_k: &Vector, x_next: &Vector, z_k: &DecisionVector) -> Result<ControlStep> {
        let initial = self.grad_norm(x_next, z_k)?;
        let seed = self.predict(x_k, x_next, z_k)?;
        let (iterate, mut report) = self.correct_until(x_next, seed.clone())?;
        report.grad_norm_initial = initial;
        report.hessian_inversions += 1;
        Ok(ControlStep {
            input: iterate.input(0),
            iterate,
            seed,
            report,
        })
    }

    /// One Newton interval seeded by the shifted previous iterate.
    pub fn n_mpc_step(&self, x_next: &Vector, z_k: &DecisionVector) -> Result<ControlStep> {
        let initial = self.grad_norm(x_next, z_k)?;
        let seed = z_k.shift();
        let (iterate, mut report) = self.correct_until(x_next, seed.clone())?;
        report.grad_norm_initial = initial;
        Ok(ControlStep {
            input: iterate.input(0),
            iterate,
            seed,
            report,
        })
    }
}

/// Blockwise shift of a decision vector.
pub fn shift(z: &DecisionVector) -> DecisionVector {
    z.shift()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{friction_problem, FrictionSetup};
    use nalgebra::dvector;

    fn friction() -> HorizonProblem {
        friction_problem(&FrictionSetup::default()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::new(0.0, 5).is_err());
        assert!(SolverConfig::new(1e-4, 0).is_err());
        assert!(SolverConfig::new(1e-4, 1).is_ok());
    }

    #[test]
    fn cold_start_at_origin_is_immediate() {
        let p = friction();
        let s = Solver::new(&p, SolverConfig::new(1e-4, 50).unwrap()).unwrap();
        let (z, rep) = s.cold_start(&dvector![0.0, 0.0]).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.grad_norm, 0.0);
        assert_eq!(z.as_vector().amax(), 0.0);
    }

    #[test]
    fn already_accurate_seed_needs_no_correction() {
        let p = friction();
        let s = Solver::new(&p, SolverConfig::new(1e-4, 50).unwrap()).unwrap();
        let z = DecisionVector::zeros(s.layout());
        let (_, rep) = s.correct_until(&dvector![0.0, 0.0], z).unwrap();
        assert_eq!(rep.corrections_used, 0);
        assert!(rep.converged);
        assert_eq!(s.counter().get(), 0);
    }

    #[test]
    fn hitting_the_cap_reports_nonconvergence() {
        let p = friction();
        let s = Solver::new(&p, SolverConfig::new(1e-14, 1).unwrap()).unwrap();
        let x = dvector![0.1, 0.1];
        let z = s.rollout_guess(&x).unwrap();
        let (_, rep) = s.correct_until(&x, z).unwrap();
        assert_eq!(rep.corrections_used, 1);
        assert!(!rep.converged);
    }
}
