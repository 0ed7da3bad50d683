//! Decision-vector layout, Lagrangian derivatives and the dense KKT solve.
//!
//! The unknown is `z = [xbar; ubar; lambda]` with `H + 1` predicted states,
//! `H` inputs and `H + 1` multipliers. The Lagrangian is
//!
//! ```text
//! L(x, z) = sum_i l(xbar_i, ubar_i) + l_H(xbar_{H+1})
//!         + lambda_1^T (xbar_1 - x)
//!         + sum_i lambda_{i+1}^T (xbar_{i+1} - f(xbar_i, ubar_i))
//! ```
//!
//! Indices in this module are 0-based: stage `i` couples `xbar[i]`,
//! `ubar[i]` and the dynamics multiplier `lambda[i + 1]`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::linalg::LU;
use serde::{Deserialize, Serialize};

use crate::model::{check_dims, HorizonProblem};
use crate::{Error, Matrix, Result, Vector};

/// Block sizes of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub n: usize,
    pub p: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn new(n: usize, p: usize, horizon: usize) -> Self {
        Self { n, p, horizon }
    }

    pub fn of(problem: &HorizonProblem) -> Self {
        Self::new(problem.state_dim(), problem.input_dim(), problem.horizon)
    }

    pub fn dim(&self) -> usize {
        self.horizon * (2 * self.n + self.p) + 2 * self.n
    }

    pub fn state_offset(&self, i: usize) -> usize {
        i * self.n
    }

    pub fn input_offset(&self, i: usize) -> usize {
        self.n * (self.horizon + 1) + i * self.p
    }

    pub fn multiplier_offset(&self, i: usize) -> usize {
        self.n * (self.horizon + 1) + self.p * self.horizon + i * self.n
    }
}

/// Packed `[xbar; ubar; lambda]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    layout: Layout,
    data: Vector,
}

impl DecisionVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            data: Vector::zeros(layout.dim()),
        }
    }

    pub fn from_vector(layout: Layout, data: Vector) -> Result<Self> {
        check_dims("decision vector", &data, layout.dim())?;
        Ok(Self { layout, data })
    }

    /// Pack `H + 1` states, `H` inputs and `H + 1` multipliers.
    pub fn pack(layout: Layout, xbar: &[Vector], ubar: &[Vector], lambda: &[Vector]) -> Result<Self> {
        let h = layout.horizon;
        if xbar.len() != h + 1 || ubar.len() != h || lambda.len() != h + 1 {
            return Err(Error::Layout(format!(
                "expected {} / {h} / {} blocks, got {} / {} / {}",
                h + 1,
                h + 1,
                xbar.len(),
                ubar.len(),
                lambda.len()
            )));
        }
        let mut z = Self::zeros(layout);
        for (i, x) in xbar.iter().enumerate() {
            check_dims("state block", x, layout.n)?;
            z.state_mut(i).copy_from(x);
        }
        for (i, u) in ubar.iter().enumerate() {
            check_dims("input block", u, layout.p)?;
            z.input_mut(i).copy_from(u);
        }
        for (i, l) in lambda.iter().enumerate() {
            check_dims("multiplier block", l, layout.n)?;
            z.multiplier_mut(i).copy_from(l);
        }
        Ok(z)
    }

    /// Inverse of [`pack`](Self::pack).
    pub fn unpack(&self) -> (Vec<Vector>, Vec<Vector>, Vec<Vector>) {
        let h = self.layout.horizon;
        (
            (0..=h).map(|i| self.state(i)).collect(),
            (0..h).map(|i| self.input(i)).collect(),
            (0..=h).map(|i| self.multiplier(i)).collect(),
        )
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn as_vector(&self) -> &Vector {
        &self.data
    }

    pub fn into_vector(self) -> Vector {
        self.data
    }

    pub fn state(&self, i: usize) -> Vector {
        self.data.rows(self.layout.state_offset(i), self.layout.n).into_owned()
    }

    pub fn input(&self, i: usize) -> Vector {
        self.data.rows(self.layout.input_offset(i), self.layout.p).into_owned()
    }

    pub fn multiplier(&self, i: usize) -> Vector {
        self.data
            .rows(self.layout.multiplier_offset(i), self.layout.n)
            .into_owned()
    }

    fn state_mut(&mut self, i: usize) -> nalgebra::DVectorViewMut<'_, f64> {
        let off = self.layout.state_offset(i);
        self.data.rows_mut(off, self.layout.n)
    }

    fn input_mut(&mut self, i: usize) -> nalgebra::DVectorViewMut<'_, f64> {
        let off = self.layout.input_offset(i);
        self.data.rows_mut(off, self.layout.p)
    }

    fn multiplier_mut(&mut self, i: usize) -> nalgebra::DVectorViewMut<'_, f64> {
        let off = self.layout.multiplier_offset(i);
        self.data.rows_mut(off, self.layout.n)
    }

    /// Advance every block one stage, repeating the last one.
    pub fn shift(&self) -> Self {
        let h = self.layout.horizon;
        let mut out = self.clone();
        for i in 0..h {
            out.state_mut(i).copy_from(&self.state(i + 1));
            out.multiplier_mut(i).copy_from(&self.multiplier(i + 1));
        }
        for i in 0..h.saturating_sub(1) {
            out.input_mut(i).copy_from(&self.input(i + 1));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self - step`
    pub fn minus(&self, step: &Vector) -> Self {
        Self {
            layout: self.layout,
            data: &self.data - step,
        }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (&self.data - &other.data).norm()
    }
}

/// Derivatives of the Lagrangian at one `(x, z)`.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub grad: Vector,
    pub hess_zz: Matrix,
    /// `D x n`; only the `lambda_1` rows are nonzero.
    pub hess_zx: Matrix,
    /// Set when the plant supplied no second derivatives and the multiplier
    /// curvature was dropped.
    pub gauss_newton: bool,
}

fn check_point(problem: &HorizonProblem, x_now: &Vector, z: &DecisionVector) -> Result<Layout> {
    let layout = Layout::of(problem);
    check_dims("current state", x_now, layout.n)?;
    if z.layout() != layout {
        return Err(Error::Layout(format!(
            "decision vector layout {:?} does not match problem layout {layout:?}",
            z.layout()
        )));
    }
    Ok(layout)
}

fn ensure_finite(v: &Vector, x: &Vector, u: &Vector) -> Result<()> {
    if v.iter().all(|e| e.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
        })
    }
}

/// Scalar Lagrangian. Used as the finite-difference reference for the
/// analytic gradient.
pub fn lagrangian(problem: &HorizonProblem, x_now: &Vector, z: &DecisionVector) -> Result<f64> {
    let layout = check_point(problem, x_now, z)?;
    let h = layout.horizon;
    let (xbar, ubar, lambda) = z.unpack();
    let mut value = problem.eval_objective(&xbar, &ubar)?;
    value += lambda[0].dot(&(&xbar[0] - x_now));
    for i in 0..h {
        let next = problem.plant.step(&xbar[i], &ubar[i])?;
        ensure_finite(&next, &xbar[i], &ubar[i])?;
        value += lambda[i + 1].dot(&(&xbar[i + 1] - next));
    }
    Ok(value)
}

/// Analytic `grad_z L(x_now, z)`.
pub fn eval_gradient(problem: &HorizonProblem, x_now: &Vector, z: &DecisionVector) -> Result<Vector> {
    let layout = check_point(problem, x_now, z)?;
    let h = layout.horizon;
    let (xbar, ubar, lambda) = z.unpack();
    let mut grad = Vector::zeros(layout.dim());

    grad.rows_mut(layout.multiplier_offset(0), layout.n)
        .copy_from(&(&xbar[0] - x_now));

    for i in 0..h {
        let (x, u) = (&xbar[i], &ubar[i]);
        let next = problem.plant.step(x, u)?;
        ensure_finite(&next, x, u)?;
        let jac = problem.plant.step_jacobians(x, u)?;
        let (gx, gu) = problem.cost.stage_gradient(x, u);
        let mult = &lambda[i + 1];

        let gx = gx + &lambda[i] - jac.x.transpose() * mult;
        let gu = gu - jac.u.transpose() * mult;
        grad.rows_mut(layout.state_offset(i), layout.n).copy_from(&gx);
        grad.rows_mut(layout.input_offset(i), layout.p).copy_from(&gu);
        grad.rows_mut(layout.multiplier_offset(i + 1), layout.n)
            .copy_from(&(&xbar[i + 1] - next));
    }
    let terminal = problem.cost.terminal_gradient(&xbar[h]) + &lambda[h];
    grad.rows_mut(layout.state_offset(h), layout.n).copy_from(&terminal);
    ensure_finite(&grad, x_now, &Vector::zeros(0))?;
    Ok(grad)
}

/// `grad_zx L`: the `-I_n` block in the `lambda_1` rows, zero elsewhere.
pub fn cross_hessian(layout: Layout) -> Matrix {
    let mut m = Matrix::zeros(layout.dim(), layout.n);
    let off = layout.multiplier_offset(0);
    for r in 0..layout.n {
        m[(off + r, r)] = -1.0;
    }
    m
}

/// Gradient, Hessian and cross-derivative of the Lagrangian.
pub fn eval_kkt(problem: &HorizonProblem, x_now: &Vector, z: &DecisionVector) -> Result<KktSystem> {
    let grad = eval_gradient(problem, x_now, z)?;
    let layout = Layout::of(problem);
    let (n, p, h) = (layout.n, layout.p, layout.horizon);
    let (xbar, ubar, lambda) = z.unpack();
    let mut hess = Matrix::zeros(layout.dim(), layout.dim());
    let mut gauss_newton = false;

    // Initial-condition constraint.
    let l0 = layout.multiplier_offset(0);
    let x0 = layout.state_offset(0);
    for r in 0..n {
        hess[(l0 + r, x0 + r)] = 1.0;
        hess[(x0 + r, l0 + r)] = 1.0;
    }

    for i in 0..h {
        let (x, u) = (&xbar[i], &ubar[i]);
        let jac = problem.plant.step_jacobians(x, u)?;
        let cost = problem.cost.stage_hessian(x, u);
        let xo = layout.state_offset(i);
        let uo = layout.input_offset(i);
        let xn = layout.state_offset(i + 1);
        let lo = layout.multiplier_offset(i + 1);

        // Stage block over (xbar_i, ubar_i).
        let mut block = Matrix::zeros(n + p, n + p);
        block.view_mut((0, 0), (n, n)).copy_from(&cost.xx);
        block.view_mut((n, n), (p, p)).copy_from(&cost.uu);
        block.view_mut((0, n), (n, p)).copy_from(&cost.xu);
        block.view_mut((n, 0), (p, n)).copy_from(&cost.xu.transpose());
        match problem.plant.step_weighted_hessian(x, u, &lambda[i + 1])? {
            Some(curv) => block -= curv,
            None => gauss_newton = true,
        }
        hess.view_mut((xo, xo), (n, n)).copy_from(&block.view((0, 0), (n, n)));
        hess.view_mut((uo, uo), (p, p)).copy_from(&block.view((n, n), (p, p)));
        hess.view_mut((xo, uo), (n, p)).copy_from(&block.view((0, n), (n, p)));
        hess.view_mut((uo, xo), (p, n)).copy_from(&block.view((n, 0), (p, n)));

        // Dynamics constraint xbar_{i+1} - f(xbar_i, ubar_i).
        let neg_fx = -&jac.x;
        let neg_fu = -&jac.u;
        hess.view_mut((lo, xo), (n, n)).copy_from(&neg_fx);
        hess.view_mut((xo, lo), (n, n)).copy_from(&neg_fx.transpose());
        hess.view_mut((lo, uo), (n, p)).copy_from(&neg_fu);
        hess.view_mut((uo, lo), (p, n)).copy_from(&neg_fu.transpose());
        for r in 0..n {
            hess[(lo + r, xn + r)] = 1.0;
            hess[(xn + r, lo + r)] = 1.0;
        }
    }
    let xh = layout.state_offset(h);
    hess.view_mut((xh, xh), (n, n))
        .copy_from(&problem.cost.terminal_hessian(&xbar[h]));

    if hess.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            x: x_now.iter().copied().collect(),
            u: Vec::new(),
        });
    }

    Ok(KktSystem {
        grad,
        hess_zz: hess,
        hess_zx: cross_hessian(layout),
        gauss_newton,
    })
}

/// Shared tally of dense KKT factorisations. Clones share the count.
#[derive(Debug, Clone, Default)]
pub struct InversionCounter(Arc<AtomicU64>);

impl InversionCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
pub struct LinearSolveReport {
    pub solution: Vector,
    /// Ratio of the largest to smallest pivot of the LU factor.
    pub condition_estimate: f64,
    pub inversions_counted: u32,
}

/// Solve `matrix * s = rhs` by LU with partial pivoting, bill one inversion
/// on `counter` and refine once against the residual.
pub fn solve_kkt(matrix: &Matrix, rhs: &Vector, counter: &InversionCounter) -> Result<LinearSolveReport> {
    let d = matrix.nrows();
    if !matrix.is_square() || rhs.len() != d {
        return Err(Error::Layout(format!(
            "KKT solve with {}x{} matrix and rhs of length {}",
            matrix.nrows(),
            matrix.ncols(),
            rhs.len()
        )));
    }
    if matrix.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            x: Vec::new(),
            u: Vec::new(),
        });
    }
    counter.bump();

    let lu = LU::new(matrix.clone());
    let u = lu.u();
    let pivots = u.diagonal().map(f64::abs);
    let (pmax, pmin) = (pivots.max(), pivots.min());
    let condition_estimate = if pmin > 0.0 { pmax / pmin } else { f64::INFINITY };
    if condition_estimate.is_nan() || condition_estimate >= 1.0 / f64::EPSILON {
        return Err(Error::SingularKkt { condition_estimate });
    }

    let singular = || Error::SingularKkt { condition_estimate };
    let mut solution = lu.solve(rhs).ok_or_else(singular)?;
    let residual = rhs - matrix * &solution;
    if let Some(fix) = lu.solve(&residual) {
        solution += fix;
    }

    let residual = (matrix * &solution - rhs).amax();
    if !solution.iter().all(|v| v.is_finite()) || residual > 1e-8 * (1.0 + rhs.amax()) {
        return Err(singular());
    }
    Ok(LinearSolveReport {
        solution,
        condition_estimate,
        inversions_counted: 1,
    })
}

/// Add `jitter * I` when exploratory regularisation is switched on.
pub(crate) fn regularized(hess: &Matrix, jitter: Option<f64>) -> std::borrow::Cow<'_, Matrix> {
    match jitter {
        Some(eps) if eps != 0.0 => {
            let d = hess.nrows();
            std::borrow::Cow::Owned(hess + Matrix::identity(d, d) * eps)
        }
        _ => std::borrow::Cow::Borrowed(hess),
    }
}
