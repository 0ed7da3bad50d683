//! Benchmark plants and problem builders.

use std::sync::Arc;

use nalgebra::{dmatrix, dvector};

use crate::model::{euler_discretize, ContinuousModel, HorizonProblem, Jacobians, LinearPlant, QuadraticCost};
use crate::{Error, Matrix, Result, Vector};

fn sech2(a: f64) -> f64 {
    let c = a.cosh();
    1.0 / (c * c)
}

/// Velocity-dependent friction
/// `F(v) = 0.25 (tanh(100 v) - tanh(10 v)) + 0.1 tanh(50 v) + 0.01 v`.
pub fn friction_force(v: f64) -> f64 {
    0.25 * ((100.0 * v).tanh() - (10.0 * v).tanh()) + 0.1 * (50.0 * v).tanh() + 0.01 * v
}

pub fn friction_force_derivative(v: f64) -> f64 {
    0.25 * (100.0 * sech2(100.0 * v) - 10.0 * sech2(10.0 * v)) + 5.0 * sech2(50.0 * v) + 0.01
}

pub fn friction_force_second_derivative(v: f64) -> f64 {
    // d/dv sech^2(a v) = -2 a sech^2(a v) tanh(a v)
    let term = |a: f64| -2.0 * a * a * sech2(a * v) * (a * v).tanh();
    0.25 * (term(100.0) - term(10.0)) + 0.1 * term(50.0)
}

/// Point mass with nonlinear friction: `M xdd = u - M g F(xd)`.
/// State `(position, velocity)`, one force input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrictionModel {
    pub gravity: f64,
    pub mass: f64,
}

impl Default for FrictionModel {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            mass: 0.2,
        }
    }
}

pub fn friction_model(gravity: f64, mass: f64) -> Result<FrictionModel> {
    if mass.is_nan() || mass <= 0.0 {
        return Err(Error::InvalidParameter(format!("mass must be positive, got {mass}")));
    }
    Ok(FrictionModel { gravity, mass })
}

impl ContinuousModel for FrictionModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn rhs(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok(dvector![x[1], u[0] / self.mass - self.gravity * friction_force(x[1])])
    }

    fn rhs_jacobians(&self, x: &Vector, _u: &Vector) -> Result<Jacobians> {
        Ok(Jacobians {
            x: dmatrix![0.0, 1.0; 0.0, -self.gravity * friction_force_derivative(x[1])],
            u: dmatrix![0.0; 1.0 / self.mass],
        })
    }

    fn rhs_weighted_hessian(&self, x: &Vector, _u: &Vector, w: &Vector) -> Result<Option<Matrix>> {
        let mut hess = Matrix::zeros(3, 3);
        hess[(1, 1)] = -w[1] * self.gravity * friction_force_second_derivative(x[1]);
        Ok(Some(hess))
    }
}

/// Hicks continuous stirred-tank reactor constants (dimensionless).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HicksParams {
    /// Coolant temperature.
    pub z_cw: f64,
    /// Feed temperature.
    pub z_f: f64,
    /// Activation energy.
    pub ea: f64,
    pub nu: f64,
    pub k0: f64,
    pub u_1sf: f64,
    /// Residence time.
    pub theta: f64,
}

impl Default for HicksParams {
    fn default() -> Self {
        Self {
            z_cw: 2.9,
            z_f: 3.0,
            ea: 25.2,
            nu: 1.95e-4,
            k0: 300.0,
            u_1sf: 600.0,
            theta: 10.0,
        }
    }
}

/// Operating point the Hicks controller regulates to.
pub const HICKS_STEADY_STATE: [f64; 2] = [0.408, 3.29763];
pub const HICKS_STEADY_INPUT: f64 = 0.6167;

/// State `(z_c, z_T)` = (concentration, temperature), input = cooling flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HicksModel {
    pub params: HicksParams,
}

pub fn hicks_model(params: HicksParams) -> HicksModel {
    HicksModel { params }
}

impl HicksModel {
    fn arrhenius(&self, z_t: f64) -> Result<f64> {
        if z_t.is_nan() || z_t <= 0.0 {
            return Err(Error::Domain(format!("temperature must be positive, got {z_t}")));
        }
        Ok((-self.params.ea / z_t).exp())
    }
}

impl ContinuousModel for HicksModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn rhs(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let p = &self.params;
        let (zc, zt) = (x[0], x[1]);
        let rate = p.k0 * zc * self.arrhenius(zt)?;
        let cooling = p.nu * p.u_1sf * u[0] * (zt - p.z_cw);
        Ok(dvector![
            (1.0 - zc) / p.theta - rate,
            (p.z_f - zt) / p.theta + rate - cooling
        ])
    }

    fn rhs_jacobians(&self, x: &Vector, u: &Vector) -> Result<Jacobians> {
        let p = &self.params;
        let (zc, zt) = (x[0], x[1]);
        let e = self.arrhenius(zt)?;
        let d_rate_dc = p.k0 * e;
        let d_rate_dt = p.k0 * zc * e * p.ea / (zt * zt);
        let gain = p.nu * p.u_1sf;
        Ok(Jacobians {
            x: dmatrix![
                -1.0 / p.theta - d_rate_dc, -d_rate_dt;
                d_rate_dc, -1.0 / p.theta + d_rate_dt - gain * u[0]
            ],
            u: dmatrix![0.0; -gain * (zt - p.z_cw)],
        })
    }

    fn rhs_weighted_hessian(&self, x: &Vector, _u: &Vector, w: &Vector) -> Result<Option<Matrix>> {
        let p = &self.params;
        let (zc, zt) = (x[0], x[1]);
        let e = self.arrhenius(zt)?;
        let a = p.ea / (zt * zt);
        let rate_ct = p.k0 * e * a;
        let rate_tt = p.k0 * zc * e * (a * a - 2.0 * p.ea / (zt * zt * zt));
        // The reaction term enters the two equations with opposite signs.
        let react = w[1] - w[0];
        let gain = p.nu * p.u_1sf;
        Ok(Some(dmatrix![
            0.0, react * rate_ct, 0.0;
            react * rate_ct, react * rate_tt, -w[1] * gain;
            0.0, -w[1] * gain, 0.0
        ]))
    }
}

/// Friction benchmark settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionSetup {
    pub gravity: f64,
    pub mass: f64,
    pub ts: f64,
    pub substeps: usize,
    pub horizon: usize,
    /// Diagonal of Q.
    pub q: [f64; 2],
    pub r: f64,
}

impl Default for FrictionSetup {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            mass: 0.2,
            ts: 0.2,
            substeps: 1,
            horizon: 5,
            q: [1000.0, 2.0],
            r: 1e-3,
        }
    }
}

/// `l = (x^T Q x + R u^2) / 2`, terminal `x^T Q x / 2`.
pub fn friction_problem(setup: &FrictionSetup) -> Result<HorizonProblem> {
    let model = friction_model(setup.gravity, setup.mass)?;
    let plant = euler_discretize(Arc::new(model), setup.ts, setup.substeps)?;
    let q = Matrix::from_diagonal(&dvector![setup.q[0], setup.q[1]]);
    let cost = QuadraticCost::regulator(q.clone(), dmatrix![setup.r], q, 0.5)?;
    HorizonProblem::new(Arc::new(plant), Arc::new(cost), setup.horizon)
}

/// Hicks benchmark settings.
#[derive(Debug, Clone, PartialEq)]
pub struct HicksSetup {
    pub params: HicksParams,
    pub ts: f64,
    pub substeps: usize,
    pub horizon: usize,
    pub q: [f64; 2],
    pub r: f64,
}

impl Default for HicksSetup {
    fn default() -> Self {
        Self {
            params: HicksParams::default(),
            ts: 30.0,
            substeps: 30,
            horizon: 10,
            q: [10.0, 2.0],
            r: 1.0,
        }
    }
}

pub fn hicks_steady_state() -> (Vector, Vector) {
    (
        dvector![HICKS_STEADY_STATE[0], HICKS_STEADY_STATE[1]],
        dvector![HICKS_STEADY_INPUT],
    )
}

/// `l = (x - x_ss)^T Q (x - x_ss) + r |u - u_ss|^2`, terminal
/// `(x - x_ss)^T Q (x - x_ss)`. Cold starts roll out at `u_ss`.
pub fn hicks_problem(setup: &HicksSetup) -> Result<HorizonProblem> {
    let plant = euler_discretize(Arc::new(hicks_model(setup.params)), setup.ts, setup.substeps)?;
    let (x_ss, u_ss) = hicks_steady_state();
    let q = Matrix::from_diagonal(&dvector![setup.q[0], setup.q[1]]);
    let cost = QuadraticCost::new(q.clone(), dmatrix![setup.r], q, x_ss, u_ss.clone(), 1.0)?;
    HorizonProblem::new(Arc::new(plant), Arc::new(cost), setup.horizon)?.with_input_hint(u_ss)
}

/// Linear plant with a quadratic regulator cost (scale 1/2, terminal weight = Q).
pub fn lqr_problem(a: Matrix, b: Matrix, q: Matrix, r: Matrix, horizon: usize) -> Result<HorizonProblem> {
    let plant = LinearPlant::new(a, b)?;
    let cost = QuadraticCost::regulator(q.clone(), r, q, 0.5)?;
    HorizonProblem::new(Arc::new(plant), Arc::new(cost), horizon)
}

/// Discretised double integrator used as the default linear instance.
pub fn double_integrator_problem(ts: f64, horizon: usize) -> Result<HorizonProblem> {
    lqr_problem(
        dmatrix![1.0, ts; 0.0, 1.0],
        dmatrix![0.5 * ts * ts; ts],
        Matrix::identity(2, 2),
        dmatrix![0.1],
        horizon,
    )
}
