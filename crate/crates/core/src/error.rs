use thiserror::Error;

use crate::kkt::DecisionVector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix sizes disagree with the problem layout.
    #[error("layout error: {0}")]
    Layout(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A model or cost produced NaN/inf.
    #[error("non-finite model output at x = {x:?}, u = {u:?}")]
    NonFinite { x: Vec<f64>, u: Vec<f64> },

    #[error("state outside model domain: {0}")]
    Domain(String),

    #[error("KKT matrix singular to working precision (condition estimate {condition_estimate:e})")]
    SingularKkt { condition_estimate: f64 },

    /// Newton iterates left the finite region. The last finite iterate is kept.
    #[error("correction diverged after {corrections} steps: {reason}")]
    Diverged {
        last_finite: Box<DecisionVector>,
        corrections: usize,
        reason: String,
    },

    #[error("cold start did not converge: best gradient norm {grad_norm:e} after {iterations} iterations")]
    ColdStartFailed {
        best: Box<DecisionVector>,
        grad_norm: f64,
        iterations: usize,
    },
}
