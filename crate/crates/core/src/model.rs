//! Plants, costs and the receding-horizon problem.
//!
//! Models are immutable after construction and shared behind `Arc`, so a
//! single problem instance can drive several simulations on different
//! threads.

use std::fmt::Debug;
use std::sync::Arc;

use crate::{Error, Matrix, Result, Vector};

/// First derivatives of a map `(x, u) -> R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians {
    /// `n x n`
    pub x: Matrix,
    /// `n x p`
    pub u: Matrix,
}

/// Continuous-time vector field `xdot = rhs(x, u)` with analytic derivatives.
pub trait ContinuousModel: Send + Sync + Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn rhs(&self, x: &Vector, u: &Vector) -> Result<Vector>;

    fn rhs_jacobians(&self, x: &Vector, u: &Vector) -> Result<Jacobians>;

    /// Hessian of `w^T rhs(x, u)` with respect to the stacked `(x, u)`,
    /// an `(n + p) x (n + p)` matrix. `None` means the model does not supply
    /// second derivatives and callers fall back to Gauss-Newton.
    fn rhs_weighted_hessian(&self, _x: &Vector, _u: &Vector, _w: &Vector) -> Result<Option<Matrix>> {
        Ok(None)
    }
}

/// Discrete-time dynamics `x+ = step(x, u)`.
pub trait PlantModel: Send + Sync + Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector>;

    fn step_jacobians(&self, x: &Vector, u: &Vector) -> Result<Jacobians>;

    /// Hessian of `w^T step(x, u)` over the stacked `(x, u)`; `None` when
    /// second derivatives are unavailable.
    fn step_weighted_hessian(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Option<Matrix>>;
}

pub(crate) fn check_dims(what: &str, v: &Vector, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Layout(format!(
            "{what}: expected length {expected}, got {}",
            v.len()
        )));
    }
    Ok(())
}

fn non_finite(x: &Vector, u: &Vector) -> Error {
    Error::NonFinite {
        x: x.iter().copied().collect(),
        u: u.iter().copied().collect(),
    }
}

/// Forward-Euler discretisation with `substeps` integration steps per
/// sampling interval and the input held constant.
#[derive(Debug, Clone)]
pub struct EulerPlant {
    model: Arc<dyn ContinuousModel>,
    ts: f64,
    substeps: usize,
}

/// Discretise `model` with forward Euler over a sampling time `ts`.
pub fn euler_discretize(model: Arc<dyn ContinuousModel>, ts: f64, substeps: usize) -> Result<EulerPlant> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sampling time must be positive, got {ts}"
        )));
    }
    if substeps == 0 {
        return Err(Error::InvalidParameter("substeps must be at least 1".into()));
    }
    Ok(EulerPlant { model, ts, substeps })
}

impl EulerPlant {
    pub fn sampling_time(&self) -> f64 {
        self.ts
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn model(&self) -> &Arc<dyn ContinuousModel> {
        &self.model
    }

    fn h(&self) -> f64 {
        self.ts / self.substeps as f64
    }

    fn substep(&self, s: &Vector, u: &Vector) -> Result<Vector> {
        let f = self.model.rhs(s, u)?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(s, u));
        }
        Ok(s + f * self.h())
    }

    /// Intermediate states `s_0 = x, ..., s_substeps`.
    fn substep_states(&self, x: &Vector, u: &Vector) -> Result<Vec<Vector>> {
        let mut states = Vec::with_capacity(self.substeps + 1);
        states.push(x.clone());
        for j in 0..self.substeps {
            let next = self.substep(&states[j], u)?;
            states.push(next);
        }
        Ok(states)
    }
}

impl PlantModel for EulerPlant {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        check_dims("state", x, self.state_dim())?;
        check_dims("input", u, self.input_dim())?;
        let mut s = x.clone();
        for _ in 0..self.substeps {
            s = self.substep(&s, u)?;
        }
        Ok(s)
    }

    fn step_jacobians(&self, x: &Vector, u: &Vector) -> Result<Jacobians> {
        check_dims("state", x, self.state_dim())?;
        check_dims("input", u, self.input_dim())?;
        let (n, p) = (self.state_dim(), self.input_dim());
        let h = self.h();
        let mut s = x.clone();
        let mut sx = Matrix::identity(n, n);
        let mut su = Matrix::zeros(n, p);
        for _ in 0..self.substeps {
            let jac = self.model.rhs_jacobians(&s, u)?;
            let gx = Matrix::identity(n, n) + &jac.x * h;
            su = &gx * su + &jac.u * h;
            sx = &gx * sx;
            s = self.substep(&s, u)?;
        }
        Ok(Jacobians { x: sx, u: su })
    }

    fn step_weighted_hessian(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Option<Matrix>> {
        check_dims("state", x, self.state_dim())?;
        check_dims("input", u, self.input_dim())?;
        check_dims("weight", w, self.state_dim())?;
        let (n, p) = (self.state_dim(), self.input_dim());
        let h = self.h();
        let states = self.substep_states(x, u)?;

        // Forward sensitivities T_j = d(s_j, u) / d(x, u).
        let mut sens = Vec::with_capacity(self.substeps);
        let mut jacs = Vec::with_capacity(self.substeps);
        let mut t = Matrix::identity(n + p, n + p);
        for s in states.iter().take(self.substeps) {
            let jac = self.model.rhs_jacobians(s, u)?;
            sens.push(t.clone());
            let gx = Matrix::identity(n, n) + &jac.x * h;
            let mut next = t.clone();
            let top = &gx * t.rows(0, n) + &jac.u * h * t.rows(n, p);
            next.rows_mut(0, n).copy_from(&top);
            t = next;
            jacs.push(gx);
        }

        // Backward adjoint sweep accumulating T_j^T (h * Hess(w_{j+1}^T rhs)) T_j.
        let mut weight = w.clone();
        let mut acc = Matrix::zeros(n + p, n + p);
        for j in (0..self.substeps).rev() {
            let Some(local) = self.model.rhs_weighted_hessian(&states[j], u, &weight)? else {
                return Ok(None);
            };
            let tj = &sens[j];
            acc += tj.transpose() * (local * h) * tj;
            weight = jacs[j].transpose() * weight;
        }
        Ok(Some(acc))
    }
}

/// Linear time-invariant plant `x+ = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub a: Matrix,
    pub b: Matrix,
}

impl LinearPlant {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(Error::Layout(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }
}

impl PlantModel for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        check_dims("state", x, self.state_dim())?;
        check_dims("input", u, self.input_dim())?;
        Ok(&self.a * x + &self.b * u)
    }

    fn step_jacobians(&self, x: &Vector, u: &Vector) -> Result<Jacobians> {
        check_dims("state", x, self.state_dim())?;
        check_dims("input", u, self.input_dim())?;
        Ok(Jacobians {
            x: self.a.clone(),
            u: self.b.clone(),
        })
    }

    fn step_weighted_hessian(&self, _x: &Vector, _u: &Vector, _w: &Vector) -> Result<Option<Matrix>> {
        let d = self.state_dim() + self.input_dim();
        Ok(Some(Matrix::zeros(d, d)))
    }
}

/// Second derivatives of the stage cost.
#[derive(Debug, Clone, PartialEq)]
pub struct StageHessian {
    pub xx: Matrix,
    pub uu: Matrix,
    /// `n x p`
    pub xu: Matrix,
}

/// Stage cost `l(x, u)` and terminal cost `l_H(x)` with analytic derivatives.
pub trait CostFunction: Send + Sync + Debug {
    fn stage(&self, x: &Vector, u: &Vector) -> f64;
    /// `(grad_x l, grad_u l)`
    fn stage_gradient(&self, x: &Vector, u: &Vector) -> (Vector, Vector);
    fn stage_hessian(&self, x: &Vector, u: &Vector) -> StageHessian;

    fn terminal(&self, x: &Vector) -> f64;
    fn terminal_gradient(&self, x: &Vector) -> Vector;
    fn terminal_hessian(&self, x: &Vector) -> Matrix;
}

/// `scale * [(x - x_ref)^T Q (x - x_ref) + (u - u_ref)^T R (u - u_ref)]` per
/// stage and `scale * (x - x_ref)^T Q_f (x - x_ref)` at the end of the horizon.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    pub q: Matrix,
    pub r: Matrix,
    pub q_terminal: Matrix,
    pub x_ref: Vector,
    pub u_ref: Vector,
    pub scale: f64,
}

impl QuadraticCost {
    pub fn new(q: Matrix, r: Matrix, q_terminal: Matrix, x_ref: Vector, u_ref: Vector, scale: f64) -> Result<Self> {
        let n = x_ref.len();
        let p = u_ref.len();
        let ok = q.shape() == (n, n) && q_terminal.shape() == (n, n) && r.shape() == (p, p);
        if !ok {
            return Err(Error::Layout(format!("cost weights do not match n = {n}, p = {p}")));
        }
        // Only the symmetric part contributes.
        let sym = |m: Matrix| (&m + m.transpose()) * 0.5;
        Ok(Self {
            q: sym(q),
            r: sym(r),
            q_terminal: sym(q_terminal),
            x_ref,
            u_ref,
            scale,
        })
    }

    /// Cost centred at the origin.
    pub fn regulator(q: Matrix, r: Matrix, q_terminal: Matrix, scale: f64) -> Result<Self> {
        let (n, p) = (q.nrows(), r.nrows());
        Self::new(q, r, q_terminal, Vector::zeros(n), Vector::zeros(p), scale)
    }
}

impl CostFunction for QuadraticCost {
    fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        self.scale * (dx.dot(&(&self.q * &dx)) + du.dot(&(&self.r * &du)))
    }

    fn stage_gradient(&self, x: &Vector, u: &Vector) -> (Vector, Vector) {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        (&self.q * dx * (2.0 * self.scale), &self.r * du * (2.0 * self.scale))
    }

    fn stage_hessian(&self, _x: &Vector, _u: &Vector) -> StageHessian {
        StageHessian {
            xx: &self.q * (2.0 * self.scale),
            uu: &self.r * (2.0 * self.scale),
            xu: Matrix::zeros(self.q.nrows(), self.r.nrows()),
        }
    }

    fn terminal(&self, x: &Vector) -> f64 {
        let dx = x - &self.x_ref;
        self.scale * dx.dot(&(&self.q_terminal * &dx))
    }

    fn terminal_gradient(&self, x: &Vector) -> Vector {
        &self.q_terminal * (x - &self.x_ref) * (2.0 * self.scale)
    }

    fn terminal_hessian(&self, _x: &Vector) -> Matrix {
        &self.q_terminal * (2.0 * self.scale)
    }
}

/// One instance of the receding-horizon program: minimise the cumulative
/// cost over `horizon` stages subject to the plant dynamics and the
/// current-state pin.
#[derive(Debug, Clone)]
pub struct HorizonProblem {
    pub plant: Arc<dyn PlantModel>,
    pub cost: Arc<dyn CostFunction>,
    pub horizon: usize,
    /// Constant input used to roll out the initial guess in cold starts.
    pub input_hint: Vector,
}

impl HorizonProblem {
    pub fn new(plant: Arc<dyn PlantModel>, cost: Arc<dyn CostFunction>, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        let p = plant.input_dim();
        Ok(Self {
            plant,
            cost,
            horizon,
            input_hint: Vector::zeros(p),
        })
    }

    pub fn with_input_hint(mut self, hint: Vector) -> Result<Self> {
        check_dims("input hint", &hint, self.input_dim())?;
        self.input_hint = hint;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.plant.input_dim()
    }

    /// `H (2n + p) + 2n`
    pub fn decision_dim(&self) -> usize {
        let (n, p, h) = (self.state_dim(), self.input_dim(), self.horizon);
        h * (2 * n + p) + 2 * n
    }

    /// Cumulative cost of a predicted trajectory: `H + 1` states, `H` inputs.
    pub fn eval_objective(&self, xbar: &[Vector], ubar: &[Vector]) -> Result<f64> {
        let h = self.horizon;
        if xbar.len() != h + 1 || ubar.len() != h {
            return Err(Error::Layout(format!(
                "expected {} states and {h} inputs, got {} and {}",
                h + 1,
                xbar.len(),
                ubar.len()
            )));
        }
        for x in xbar {
            check_dims("state", x, self.state_dim())?;
        }
        for u in ubar {
            check_dims("input", u, self.input_dim())?;
        }
        let running: f64 = xbar.iter().zip(ubar).map(|(x, u)| self.cost.stage(x, u)).sum();
        Ok(running + self.cost.terminal(&xbar[h]))
    }

    /// Roll the plant forward from `x0` under a constant input.
    pub fn rollout(&self, x0: &Vector, u: &Vector) -> Result<Vec<Vector>> {
        let mut xs = Vec::with_capacity(self.horizon + 1);
        xs.push(x0.clone());
        for i in 0..self.horizon {
            let next = self.plant.step(&xs[i], u)?;
            xs.push(next);
        }
        Ok(xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[derive(Debug)]
    struct Still;

    impl ContinuousModel for Still {
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn rhs(&self, _x: &Vector, _u: &Vector) -> Result<Vector> {
            Ok(Vector::zeros(2))
        }
        fn rhs_jacobians(&self, _x: &Vector, _u: &Vector) -> Result<Jacobians> {
            Ok(Jacobians {
                x: Matrix::zeros(2, 2),
                u: Matrix::zeros(2, 1),
            })
        }
    }

    #[derive(Debug)]
    struct Blowup;

    impl ContinuousModel for Blowup {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn rhs(&self, x: &Vector, _u: &Vector) -> Result<Vector> {
            Ok(x.map(|v| 1.0 / v))
        }
        fn rhs_jacobians(&self, x: &Vector, _u: &Vector) -> Result<Jacobians> {
            Ok(Jacobians {
                x: Matrix::from_element(1, 1, -1.0 / (x[0] * x[0])),
                u: Matrix::zeros(1, 1),
            })
        }
    }

    #[test]
    fn zero_field_is_identity_step() {
        let plant = euler_discretize(Arc::new(Still), 0.1, 1).unwrap();
        let x = dvector![0.3, -1.2];
        let u = dvector![4.0];
        assert_eq!(plant.step(&x, &u).unwrap(), x);
        assert_eq!(plant.step_jacobians(&x, &u).unwrap().x, Matrix::identity(2, 2));
    }

    #[test]
    fn rejects_bad_discretization_parameters() {
        assert!(matches!(
            euler_discretize(Arc::new(Still), 0.0, 1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            euler_discretize(Arc::new(Still), 0.1, 0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn non_finite_rhs_reports_offending_point() {
        let plant = euler_discretize(Arc::new(Blowup), 0.1, 1).unwrap();
        let err = plant.step(&dvector![0.0], &dvector![2.5]).unwrap_err();
        match err {
            Error::NonFinite { x, u } => {
                assert_eq!(x, vec![0.0]);
                assert_eq!(u, vec![2.5]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quadratic_objective_by_hand() {
        let cost = QuadraticCost::regulator(
            dmatrix![1000.0, 0.0; 0.0, 2.0],
            dmatrix![1e-3],
            dmatrix![1000.0, 0.0; 0.0, 2.0],
            0.5,
        )
        .unwrap();
        let plant = LinearPlant::new(Matrix::identity(2, 2), dmatrix![0.0; 1.0]).unwrap();
        let problem = HorizonProblem::new(Arc::new(plant), Arc::new(cost), 1).unwrap();
        let xbar = [dvector![0.1, 0.1], dvector![0.0, 0.0]];
        let ubar = [dvector![0.0]];
        let j = problem.eval_objective(&xbar, &ubar).unwrap();
        assert!((j - 5.01).abs() < 1e-12, "{j}");
        assert_eq!(
            problem
                .eval_objective(&[Vector::zeros(2), Vector::zeros(2)], &[Vector::zeros(1)])
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn objective_rejects_wrong_lengths() {
        let plant = LinearPlant::new(Matrix::identity(1, 1), dmatrix![1.0]).unwrap();
        let cost = QuadraticCost::regulator(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], 1.0).unwrap();
        let problem = HorizonProblem::new(Arc::new(plant), Arc::new(cost), 2).unwrap();
        let err = problem.eval_objective(&[dvector![0.0]], &[dvector![0.0]]);
        assert!(matches!(err, Err(Error::Layout(_))));
    }

    #[test]
    fn decision_dimension() {
        let plant = LinearPlant::new(Matrix::identity(2, 2), dmatrix![0.0; 1.0]).unwrap();
        let cost =
            QuadraticCost::regulator(Matrix::identity(2, 2), dmatrix![1.0], Matrix::identity(2, 2), 1.0).unwrap();
        let problem = HorizonProblem::new(Arc::new(plant), Arc::new(cost), 5).unwrap();
        assert_eq!(problem.decision_dim(), 5 * 5 + 4);
    }
}
