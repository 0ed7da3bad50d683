//! Receding-horizon control by prediction-correction tracking of the KKT point.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] — continuous and discrete plants, stage/terminal costs and the
//!   horizon problem, plus Euler discretisation.
//! * [`benchmarks`] — the friction point mass, the Hicks reactor and a linear
//!   instance with a closed-form solution.
//! * [`kkt`] — decision-vector layout, Lagrangian derivatives and the dense
//!   KKT solve that every Newton-type step bills against.
//! * [`solver`] — prediction, correction, shift, cold start and the two
//!   controllers (prediction-correction and shift-warm-started Newton).
//! * [`closed_loop`] — the plant/controller feedback loop and batches.
//! * [`diagnostics`] — derivative checks, constant estimation and empirical
//!   bound reports.

pub mod benchmarks;
pub mod closed_loop;
pub mod diagnostics;
mod error;
pub mod kkt;
pub mod model;
pub mod solver;

pub use error::{Error, Result};

/// Dense column vector used throughout.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout.
pub type Matrix = nalgebra::DMatrix<f64>;
