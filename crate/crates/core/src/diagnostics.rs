//! Numerical checks of the derivative code and of the tracking theory.
//!
//! Derivative checks compare every analytic derivative against a
//! fourth-order central difference. The theory checks work with constants
//! estimated along a logged trajectory, so every bound they evaluate is
//! local to that trajectory; reports carry the estimation region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::closed_loop::TrajectoryLog;
use crate::kkt::{cross_hessian, eval_gradient, eval_kkt, lagrangian, DecisionVector, Layout};
use crate::model::{ContinuousModel, CostFunction, HorizonProblem, PlantModel};
use crate::solver::{Solver, SolverConfig};
use crate::{Error, Matrix, Result, Vector};

// ---------------------------------------------------------------------------
// Finite differences

/// Relative step of the central stencil.
const FD_STEP: f64 = 1e-5;

/// Fourth-order central difference of a vector-valued map along coordinate
/// `j` of `at`.
fn central_difference<F>(f: &F, at: &Vector, j: usize) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let h = FD_STEP * at[j].abs().max(1.0);
    let eval = |delta: f64| {
        let mut p = at.clone();
        p[j] += delta;
        f(&p)
    };
    let (p1, m1, p2, m2) = (eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?);
    Ok((p1 * 8.0 - m1 * 8.0 - p2 + m2) / (12.0 * h))
}

/// Jacobian of `f` at `at` by central differences, column by column.
pub fn fd_jacobian<F>(f: F, at: &Vector) -> Result<Matrix>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let rows = f(at)?.len();
    let mut jac = Matrix::zeros(rows, at.len());
    for j in 0..at.len() {
        jac.set_column(j, &central_difference(&f, at, j)?);
    }
    Ok(jac)
}

pub fn fd_gradient<F>(f: F, at: &Vector) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<f64>,
{
    let wrapped = |v: &Vector| f(v).map(|s| Vector::from_element(1, s));
    Ok(fd_jacobian(wrapped, at)?.row(0).transpose())
}

/// Worst entry of one analytic-vs-numeric comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, max |numeric|)` over the compared object.
    pub rel_error: f64,
    pub tolerance: f64,
}

impl FdEntry {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    /// Worst entry per named derivative.
    pub entries: Vec<FdEntry>,
    pub samples: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(FdEntry::passed)
    }

    /// Entry with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| (a.rel_error / a.tolerance).total_cmp(&(b.rel_error / b.tolerance)))
    }

    pub fn failures(&self) -> impl Iterator<Item = &FdEntry> {
        self.entries.iter().filter(|e| !e.passed())
    }

    fn record(&mut self, name: &str, analytic: &Matrix, numeric: &Matrix, tolerance: f64) {
        let scale = numeric.amax().max(1.0);
        let mut worst = FdEntry {
            name: name.to_string(),
            row: 0,
            col: 0,
            analytic: analytic.get(0).copied().unwrap_or(0.0),
            numeric: numeric.get(0).copied().unwrap_or(0.0),
            rel_error: 0.0,
            tolerance,
        };
        for c in 0..analytic.ncols() {
            for r in 0..analytic.nrows() {
                let err = (analytic[(r, c)] - numeric[(r, c)]).abs() / scale;
                if err > worst.rel_error || err.is_nan() {
                    worst.row = r;
                    worst.col = c;
                    worst.analytic = analytic[(r, c)];
                    worst.numeric = numeric[(r, c)];
                    worst.rel_error = if err.is_nan() { f64::INFINITY } else { err };
                }
            }
        }
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) if e.rel_error >= worst.rel_error => {}
            Some(e) => *e = worst,
            None => self.entries.push(worst),
        }
    }
}

/// Axis-aligned sampling box for states and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    /// Multipliers are drawn from `[-multiplier_bound, multiplier_bound]`.
    pub multiplier_bound: f64,
}

impl SampleBox {
    /// Box around the friction operating region.
    pub fn friction() -> Self {
        Self {
            x_lo: vec![-0.5, -0.5],
            x_hi: vec![0.5, 0.5],
            u_lo: vec![-2.0],
            u_hi: vec![2.0],
            multiplier_bound: 10.0,
        }
    }

    /// Box around the Hicks steady state.
    pub fn hicks() -> Self {
        Self {
            x_lo: vec![0.2, 2.6],
            x_hi: vec![0.7, 3.8],
            u_lo: vec![0.2],
            u_hi: vec![1.0],
            multiplier_bound: 10.0,
        }
    }

    fn draw(rng: &mut ChaCha20Rng, lo: &[f64], hi: &[f64]) -> Vector {
        Vector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(&a, &b)| rng.random_range(a..=b)))
    }

    pub fn sample_state(&self, rng: &mut ChaCha20Rng) -> Vector {
        Self::draw(rng, &self.x_lo, &self.x_hi)
    }

    pub fn sample_input(&self, rng: &mut ChaCha20Rng) -> Vector {
        Self::draw(rng, &self.u_lo, &self.u_hi)
    }

    pub fn sample_multiplier(&self, rng: &mut ChaCha20Rng) -> Vector {
        let b = self.multiplier_bound;
        Vector::from_iterator(self.x_lo.len(), (0..self.x_lo.len()).map(|_| rng.random_range(-b..=b)))
    }

    /// Random decision vector with states and inputs in the box.
    pub fn sample_decision(&self, layout: Layout, rng: &mut ChaCha20Rng) -> Result<DecisionVector> {
        let xbar: Vec<_> = (0..=layout.horizon).map(|_| self.sample_state(rng)).collect();
        let ubar: Vec<_> = (0..layout.horizon).map(|_| self.sample_input(rng)).collect();
        let lambda: Vec<_> = (0..=layout.horizon).map(|_| self.sample_multiplier(rng)).collect();
        DecisionVector::pack(layout, &xbar, &ubar, &lambda)
    }
}

fn split(xu: &Vector, n: usize) -> (Vector, Vector) {
    (xu.rows(0, n).into_owned(), xu.rows(n, xu.len() - n).into_owned())
}

fn stack(x: &Vector, u: &Vector) -> Vector {
    Vector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

/// Check `rhs_jacobians` and `rhs_weighted_hessian` of a continuous model.
pub fn fd_check_continuous(
    model: &dyn ContinuousModel,
    region: &SampleBox,
    samples: usize,
    tolerance: f64,
    tolerance_second: f64,
    seed: u64,
) -> Result<FdReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = model.state_dim();
    let mut report = FdReport {
        samples,
        ..FdReport::default()
    };
    for _ in 0..samples {
        let (x, u) = (region.sample_state(&mut rng), region.sample_input(&mut rng));
        let w = region.sample_multiplier(&mut rng);
        let xu = stack(&x, &u);
        let jac = model.rhs_jacobians(&x, &u)?;
        let numeric = fd_jacobian(
            |v| {
                let (x, u) = split(v, n);
                model.rhs(&x, &u)
            },
            &xu,
        )?;
        report.record("rhs_jac_x", &jac.x, &numeric.columns(0, n).into_owned(), tolerance);
        report.record(
            "rhs_jac_u",
            &jac.u,
            &numeric.columns(n, u.len()).into_owned(),
            tolerance,
        );
        if let Some(hess) = model.rhs_weighted_hessian(&x, &u, &w)? {
            let numeric = fd_jacobian(
                |v| {
                    let (x, u) = split(v, n);
                    let j = model.rhs_jacobians(&x, &u)?;
                    Ok(hstack(&j.x, &j.u).transpose() * &w)
                },
                &xu,
            )?;
            report.record("rhs_weighted_hessian", &hess, &numeric, tolerance_second);
        }
    }
    Ok(report)
}

/// Check the discrete step Jacobians and weighted Hessian.
pub fn fd_check_plant(
    plant: &dyn PlantModel,
    region: &SampleBox,
    samples: usize,
    tolerance: f64,
    tolerance_second: f64,
    seed: u64,
) -> Result<FdReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = plant.state_dim();
    let mut report = FdReport {
        samples,
        ..FdReport::default()
    };
    for _ in 0..samples {
        let (x, u) = (region.sample_state(&mut rng), region.sample_input(&mut rng));
        let w = region.sample_multiplier(&mut rng);
        let xu = stack(&x, &u);
        let jac = plant.step_jacobians(&x, &u)?;
        let numeric = fd_jacobian(
            |v| {
                let (x, u) = split(v, n);
                plant.step(&x, &u)
            },
            &xu,
        )?;
        report.record("step_jac_x", &jac.x, &numeric.columns(0, n).into_owned(), tolerance);
        report.record(
            "step_jac_u",
            &jac.u,
            &numeric.columns(n, u.len()).into_owned(),
            tolerance,
        );
        if let Some(hess) = plant.step_weighted_hessian(&x, &u, &w)? {
            let numeric = fd_jacobian(
                |v| {
                    let (x, u) = split(v, n);
                    let j = plant.step_jacobians(&x, &u)?;
                    Ok(hstack(&j.x, &j.u).transpose() * &w)
                },
                &xu,
            )?;
            report.record("step_weighted_hessian", &hess, &numeric, tolerance_second);
        }
    }
    Ok(report)
}

/// Check cost gradients and Hessians, including Hessian symmetry.
pub fn fd_check_cost(
    cost: &dyn CostFunction,
    region: &SampleBox,
    samples: usize,
    tolerance: f64,
    tolerance_second: f64,
    seed: u64,
) -> Result<FdReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = region.x_lo.len();
    let mut report = FdReport {
        samples,
        ..FdReport::default()
    };
    for _ in 0..samples {
        let (x, u) = (region.sample_state(&mut rng), region.sample_input(&mut rng));
        let xu = stack(&x, &u);
        let (gx, gu) = cost.stage_gradient(&x, &u);
        let numeric = fd_gradient(
            |v| {
                let (x, u) = split(v, n);
                Ok(cost.stage(&x, &u))
            },
            &xu,
        )?;
        report.record(
            "stage_gradient",
            &Matrix::from_column_slice(xu.len(), 1, stack(&gx, &gu).as_slice()),
            &Matrix::from_column_slice(xu.len(), 1, numeric.as_slice()),
            tolerance,
        );

        let h = cost.stage_hessian(&x, &u);
        let p = u.len();
        let mut full = Matrix::zeros(n + p, n + p);
        full.view_mut((0, 0), (n, n)).copy_from(&h.xx);
        full.view_mut((n, n), (p, p)).copy_from(&h.uu);
        full.view_mut((0, n), (n, p)).copy_from(&h.xu);
        full.view_mut((n, 0), (p, n)).copy_from(&h.xu.transpose());
        let numeric = fd_jacobian(
            |v| {
                let (x, u) = split(v, n);
                let (gx, gu) = cost.stage_gradient(&x, &u);
                Ok(stack(&gx, &gu))
            },
            &xu,
        )?;
        report.record("stage_hessian", &full, &numeric, tolerance_second);
        report.record("stage_hessian_symmetry", &full, &full.transpose(), 1e-12);

        let gt = cost.terminal_gradient(&x);
        let numeric = fd_gradient(|v| Ok(cost.terminal(v)), &x)?;
        report.record(
            "terminal_gradient",
            &Matrix::from_column_slice(n, 1, gt.as_slice()),
            &Matrix::from_column_slice(n, 1, numeric.as_slice()),
            tolerance,
        );
        let ht = cost.terminal_hessian(&x);
        let numeric = fd_jacobian(|v| Ok(cost.terminal_gradient(v)), &x)?;
        report.record("terminal_hessian", &ht, &numeric, tolerance_second);
        report.record("terminal_hessian_symmetry", &ht, &ht.transpose(), 1e-12);
    }
    Ok(report)
}

/// Check `eval_gradient` against the scalar Lagrangian and `eval_kkt`
/// against the gradient, at random `(x_now, z)`.
pub fn fd_check_problem(
    problem: &HorizonProblem,
    region: &SampleBox,
    samples: usize,
    tolerance: f64,
    tolerance_second: f64,
    seed: u64,
) -> Result<FdReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let layout = Layout::of(problem);
    let mut report = FdReport {
        samples,
        ..FdReport::default()
    };
    for _ in 0..samples {
        let x_now = region.sample_state(&mut rng);
        let z = region.sample_decision(layout, &mut rng)?;
        let as_z = |v: &Vector| DecisionVector::from_vector(layout, v.clone());

        let sys = eval_kkt(problem, &x_now, &z)?;
        let numeric = fd_gradient(|v| lagrangian(problem, &x_now, &as_z(v)?), z.as_vector())?;
        report.record(
            "lagrangian_gradient",
            &Matrix::from_column_slice(layout.dim(), 1, sys.grad.as_slice()),
            &Matrix::from_column_slice(layout.dim(), 1, numeric.as_slice()),
            tolerance,
        );
        let numeric = fd_jacobian(|v| eval_gradient(problem, &x_now, &as_z(v)?), z.as_vector())?;
        report.record("lagrangian_hessian_zz", &sys.hess_zz, &numeric, tolerance_second);
        report.record(
            "lagrangian_hessian_symmetry",
            &sys.hess_zz,
            &sys.hess_zz.transpose(),
            1e-12,
        );
        let numeric = fd_jacobian(|x| eval_gradient(problem, x, &z), &x_now)?;
        report.record("lagrangian_hessian_zx", &sys.hess_zx, &numeric, tolerance_second);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Reference solutions

/// Newton iteration to high accuracy, used as ground truth. Stops at
/// `tolerance` or when the gradient norm stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-13,
            max_iters: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub z: DecisionVector,
    pub grad_norm: f64,
    pub iterations: usize,
}

pub fn reference_solution(
    problem: &HorizonProblem,
    x: &Vector,
    start: &DecisionVector,
    cfg: ReferenceConfig,
) -> Result<Reference> {
    let solver = Solver::new(problem, SolverConfig::new(cfg.tolerance, 1)?)?;
    let mut best = start.clone();
    let mut best_norm = solver.grad_norm(x, &best)?;
    let mut z = best.clone();
    let mut stalled = 0;
    let mut iterations = 0;
    while best_norm > cfg.tolerance && iterations < cfg.max_iters && stalled < 3 {
        z = solver.correct(x, &z)?;
        iterations += 1;
        let norm = solver.grad_norm(x, &z)?;
        if norm < best_norm {
            if norm > 0.5 * best_norm {
                stalled += 1;
            }
            best = z.clone();
            best_norm = norm;
        } else {
            stalled += 1;
        }
    }
    Ok(Reference {
        z: best,
        grad_norm: best_norm,
        iterations,
    })
}

/// Reference optima `z*_k` along a logged run, refined from the logged
/// iterates.
pub fn reference_trajectory(
    problem: &HorizonProblem,
    log: &TrajectoryLog,
    cfg: ReferenceConfig,
) -> Result<Vec<Reference>> {
    log.iterates
        .iter()
        .zip(&log.states)
        .map(|(z, x)| reference_solution(problem, x, z, cfg))
        .collect()
}

/// Prediction from an exact optimum: `z*_{k+1|k}`. Not billed anywhere.
pub fn predict_unbilled(
    problem: &HorizonProblem,
    x_k: &Vector,
    x_next: &Vector,
    z_k: &DecisionVector,
) -> Result<DecisionVector> {
    let solver = Solver::new(problem, SolverConfig::new(1.0, 1)?)?;
    solver.predict(x_k, x_next, z_k)
}

// ---------------------------------------------------------------------------
// Constants and bounds

/// Where the constants were estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRegion {
    /// Bounding box of the visited states.
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub iterates: usize,
    pub lipschitz_pairs: usize,
    pub perturbation_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    /// Half the smallest `|eig(grad_zz L)|` seen along the trajectory.
    pub m_hat: f64,
    /// Largest spectral norm of `grad_zx L`.
    pub c_hat: f64,
    /// Largest `||D(y1) - D(y2)|| / ||y1 - y2||` over sampled pairs, with
    /// `D = [grad_zz L, grad_zx L]`.
    pub l_hat: f64,
    /// Largest `||x(k+1) - x(k)|| / Ts`.
    pub b_hat: f64,
    pub sampling_time: f64,
    pub region: EstimationRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    /// Random perturbation pairs drawn around each iterate.
    pub pairs_per_iterate: usize,
    /// Radius relative to `1 + ||y||`.
    pub radius: f64,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            pairs_per_iterate: 2,
            radius: 1e-3,
            seed: 0,
        }
    }
}

fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

fn derivative_map(problem: &HorizonProblem, x: &Vector, z: &DecisionVector) -> Result<Matrix> {
    let sys = eval_kkt(problem, x, z)?;
    Ok(hstack(&sys.hess_zz, &sys.hess_zx))
}

fn min_abs_eig(problem: &HorizonProblem, x: &Vector, z: &DecisionVector) -> Result<f64> {
    let sys = eval_kkt(problem, x, z)?;
    let eig = nalgebra::SymmetricEigen::new(sys.hess_zz);
    Ok(eig.eigenvalues.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min))
}

pub fn estimate_constants(
    log: &TrajectoryLog,
    problem: &HorizonProblem,
    cfg: EstimateConfig,
) -> Result<ConstantEstimates> {
    let layout = Layout::of(problem);
    let count = log.iterates.len();
    if count == 0 {
        return Err(Error::InvalidParameter("log holds no iterates".into()));
    }
    let states = &log.states[..count];

    let min_eig = match &log.min_abs_hessian_eigenvalue {
        Some(eigs) if eigs.len() == count => eigs.iter().copied().fold(f64::INFINITY, f64::min),
        _ => {
            let mut m = f64::INFINITY;
            for (x, z) in states.iter().zip(&log.iterates) {
                m = m.min(min_abs_eig(problem, x, z)?);
            }
            m
        }
    };

    let c_hat = spectral_norm(&cross_hessian(layout));

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut l_hat: f64 = 0.0;
    let mut pairs = 0;
    let mut lipschitz = |x1: &Vector, z1: &DecisionVector, x2: &Vector, z2: &DecisionVector| -> Result<()> {
        let dist = (stack(x1, z1.as_vector()) - stack(x2, z2.as_vector())).norm();
        if dist <= 1e-12 {
            return Ok(());
        }
        let diff = derivative_map(problem, x1, z1)? - derivative_map(problem, x2, z2)?;
        l_hat = l_hat.max(spectral_norm(&diff) / dist);
        pairs += 1;
        Ok(())
    };
    for k in 0..count {
        let (x, z) = (&states[k], &log.iterates[k]);
        if k + 1 < count {
            lipschitz(x, z, &states[k + 1], &log.iterates[k + 1])?;
        }
        let scale = cfg.radius * (1.0 + stack(x, z.as_vector()).norm());
        for _ in 0..cfg.pairs_per_iterate {
            let dx = Vector::from_iterator(x.len(), (0..x.len()).map(|_| rng.random_range(-1.0..=1.0)));
            let dz = Vector::from_iterator(layout.dim(), (0..layout.dim()).map(|_| rng.random_range(-1.0..=1.0)));
            let norm = stack(&dx, &dz).norm().max(f64::MIN_POSITIVE);
            let x2 = x + dx * (scale / norm);
            let z2 = DecisionVector::from_vector(layout, z.as_vector() + dz * (scale / norm))?;
            lipschitz(x, z, &x2, &z2)?;
        }
    }

    let ts = log.sampling_time;
    let b_hat = log
        .states
        .windows(2)
        .map(|w| (&w[1] - &w[0]).norm() / ts)
        .fold(0.0, f64::max);

    let n = layout.n;
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for x in &log.states {
        for i in 0..n {
            lo[i] = lo[i].min(x[i]);
            hi[i] = hi[i].max(x[i]);
        }
    }

    Ok(ConstantEstimates {
        m_hat: min_eig / 2.0,
        c_hat,
        l_hat,
        b_hat,
        sampling_time: ts,
        region: EstimationRegion {
            state_lo: lo,
            state_hi: hi,
            iterates: count,
            lipschitz_pairs: pairs,
            perturbation_radius: cfg.radius,
        },
    })
}

/// `(1/4)(C/2m + 1)(C^2/4m^2 + 1)^{1/2}`
pub fn delta1(c: f64, m: f64) -> f64 {
    0.25 * (c / (2.0 * m) + 1.0) * (c * c / (4.0 * m * m) + 1.0).sqrt()
}

/// `(1/2)(C/m + 1)`
pub fn delta2(c: f64, m: f64) -> f64 {
    0.5 * (c / m + 1.0)
}

/// Bound on the number of corrections that keeps the iterate within
/// `eta m / L` of the optimum; `None` when the variation `bts = B Ts` is too
/// large for the bound to apply.
pub fn correction_bound(bts: f64, l: f64, m: f64, c: f64) -> Option<f64> {
    let r = l / m;
    let num = 1.0 + delta2(c, m) * bts * r;
    let den = 1.0 - r * r * delta1(c, m) * bts * bts;
    if den <= 0.0 {
        return None;
    }
    Some((1.0 + (num / den).log2()).log2())
}

/// Largest `B Ts` for which one correction suffices; infinite when `L = 0`.
pub fn one_correction_limit(l: f64, m: f64, c: f64) -> f64 {
    let (d1, d2) = (delta1(c, m), delta2(c, m));
    (m / l) * ((d2 * d2 + 8.0 * d1).sqrt() - d2) / (4.0 * d1)
}

/// Largest accuracy `eta` that still places the prediction inside the
/// quadratic convergence region; `None` when no positive `eta` works.
pub fn accuracy_requirement(bts: f64, l: f64, m: f64, c: f64) -> Option<f64> {
    let r = l / m;
    let eta = (1.0 - delta1(c, m) * r * r * bts * bts) / (1.0 + delta2(c, m) * r * bts);
    (eta > 0.0).then_some(eta)
}

/// Observed prediction error against the local bound at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionCheck {
    /// Time index of the predicted problem.
    pub k: usize,
    /// `||z^0_k - z*_k||`
    pub observed: f64,
    /// `(L/m) d1 B^2 Ts^2 + (1 + (L/m) d2 B Ts) ||z_{k-1} - z*_{k-1}||`
    pub bound: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta1: f64,
    pub delta2: f64,
    /// `B_hat * Ts`
    pub bts: f64,
    /// `None` when the estimated variation makes the bound vacuous.
    pub predicted_n: Option<f64>,
    /// `None` when `L_hat = 0` (no limit).
    pub corollary_bts_limit: Option<f64>,
    pub accuracy_requirement: Option<f64>,
    pub observed_max_corrections: usize,
    pub checks: Vec<PredictionCheck>,
    pub violations: usize,
    /// Largest gradient norm reached by the reference solves.
    pub reference_grad_norm: f64,
    pub region: EstimationRegion,
}

impl BoundReport {
    /// Does the observed work respect the correction bound? Vacuous bounds
    /// pass (they are report-only).
    pub fn corrections_within_bound(&self) -> bool {
        match self.predicted_n {
            Some(n) => self.observed_max_corrections as f64 <= n.max(1.0),
            None => true,
        }
    }
}

/// Evaluate the prediction-error bound at every step of a prediction-correction
/// run and the correction-count bounds for the whole run.
pub fn check_bounds(
    estimates: &ConstantEstimates,
    log: &TrajectoryLog,
    problem: &HorizonProblem,
    reference: ReferenceConfig,
) -> Result<BoundReport> {
    let (m, c, l) = (estimates.m_hat, estimates.c_hat, estimates.l_hat);
    let (d1, d2) = (delta1(c, m), delta2(c, m));
    let bts = estimates.b_hat * estimates.sampling_time;
    let r = l / m;

    let refs = reference_trajectory(problem, log, reference)?;
    let mut checks = Vec::new();
    for k in 1..log.iterates.len() {
        let observed = log.seeds[k].distance(&refs[k].z);
        let prev_err = log.iterates[k - 1].distance(&refs[k - 1].z);
        let bound = r * d1 * bts * bts + (1.0 + r * d2 * bts) * prev_err;
        // Slack for the accuracy of the references themselves.
        let slack = 1e-9 * (1.0 + refs[k].z.as_vector().norm());
        checks.push(PredictionCheck {
            k,
            observed,
            bound,
            violated: observed > bound + slack,
        });
    }
    let violations = checks.iter().filter(|c| c.violated).count();
    let observed_max_corrections = log
        .online_reports()
        .iter()
        .map(|r| r.corrections_used)
        .max()
        .unwrap_or(0);
    Ok(BoundReport {
        delta1: d1,
        delta2: d2,
        bts,
        predicted_n: correction_bound(bts, l, m, c),
        corollary_bts_limit: (l > 0.0).then(|| one_correction_limit(l, m, c)),
        accuracy_requirement: accuracy_requirement(bts, l, m, c),
        observed_max_corrections,
        checks,
        violations,
        reference_grad_norm: refs.iter().map(|r| r.grad_norm).fold(0.0, f64::max),
        region: estimates.region.clone(),
    })
}

// ---------------------------------------------------------------------------
// Convergence-order studies

/// Errors `||z^j - z*||` of successive unit Newton steps from `seed`.
pub fn newton_error_sequence(
    problem: &HorizonProblem,
    x: &Vector,
    seed: &DecisionVector,
    optimum: &DecisionVector,
    steps: usize,
) -> Result<Vec<f64>> {
    let solver = Solver::new(problem, SolverConfig::new(1.0, 1)?)?;
    let mut z = seed.clone();
    let mut errors = vec![z.distance(optimum)];
    for _ in 0..steps {
        z = solver.correct(x, &z)?;
        errors.push(z.distance(optimum));
    }
    Ok(errors)
}

/// Least-squares fit of `log e_{j+1} = log c + p log e_j` over consecutive
/// pairs with both errors above `floor`. Returns `(p, c, pairs used)`.
pub fn fit_contraction(errors: &[f64], floor: f64) -> Option<(f64, f64, usize)> {
    let pts: Vec<(f64, f64)> = errors
        .windows(2)
        .filter(|w| w[0] > floor && w[1] > floor)
        .map(|w| (w[0].ln(), w[1].ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let p = sxy / sxx;
    Some((p, (my - p * mx).exp(), pts.len()))
}

/// Mean one-step prediction error from exact optima over a state sequence.
pub fn mean_prediction_error(problem: &HorizonProblem, states: &[Vector], optima: &[DecisionVector]) -> Result<f64> {
    if states.len() < 2 || states.len() != optima.len() {
        return Err(Error::InvalidParameter(
            "need matching states and optima, at least two".into(),
        ));
    }
    let mut total = 0.0;
    for k in 0..states.len() - 1 {
        let predicted = predict_unbilled(problem, &states[k], &states[k + 1], &optima[k])?;
        total += predicted.distance(&optima[k + 1]);
    }
    Ok(total / (states.len() - 1) as f64)
}

/// Result of comparing prediction errors at two sampling resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderStudy {
    pub mean_error_full: f64,
    pub mean_error_half: f64,
    /// `mean_error_full / mean_error_half`; 4 for a second-order error.
    pub ratio: f64,
    pub steps_full: usize,
    pub steps_half: usize,
}

/// Compare one-step prediction errors along a logged run at the control
/// interval and at half of it.
///
/// The half-interval states are obtained by advancing each logged state
/// with `half_plant` (the true plant over half an interval) under the
/// logged input, so both resolutions sample the same state path. Errors
/// are taken from exact optima, `||z*_{k+1|k} - z*_{k+1}||`.
pub fn prediction_order_study(
    problem: &HorizonProblem,
    log: &TrajectoryLog,
    half_plant: &dyn PlantModel,
    reference: ReferenceConfig,
) -> Result<OrderStudy> {
    let refs = reference_trajectory(problem, log, reference)?;
    let steps = refs.len().min(log.inputs.len() + 1);
    if steps < 2 {
        return Err(Error::InvalidParameter(
            "order study needs at least one logged step".into(),
        ));
    }
    let (mut full, mut half) = (0.0, 0.0);
    for k in 0..steps - 1 {
        let (x, x_next, u) = (&log.states[k], &log.states[k + 1], &log.inputs[k]);
        let z = &refs[k].z;
        full += predict_unbilled(problem, x, x_next, z)?.distance(&refs[k + 1].z);

        let x_mid = half_plant.step(x, u)?;
        let seed = predict_unbilled(problem, x, &x_mid, z)?;
        let z_mid = reference_solution(problem, &x_mid, &seed, reference)?.z;
        half += seed.distance(&z_mid);
        half += predict_unbilled(problem, &x_mid, x_next, &z_mid)?.distance(&refs[k + 1].z);
    }
    let steps_full = steps - 1;
    let steps_half = 2 * steps_full;
    let mean_error_full = full / steps_full as f64;
    let mean_error_half = half / steps_half as f64;
    Ok(OrderStudy {
        mean_error_full,
        mean_error_half,
        ratio: mean_error_full / mean_error_half,
        steps_full,
        steps_half,
    })
}
