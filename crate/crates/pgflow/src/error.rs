//! Error taxonomy shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("problem does not supply the required derivative callbacks: {0}")]
    UnsupportedProblem(String),

    #[error("CFL substep budget exceeded: level needs {needed} substeps, cap is {cap}")]
    CflFailure { needed: usize, cap: usize },

    #[error("mass conservation failure: spatial mean drifted by {drift:.3e} (tolerance {tol:.3e})")]
    ConservationFailure { drift: f64, tol: f64 },

    #[error("argmax failed to converge: best |grad| = {best_residual:.3e} at {location}")]
    ArgmaxFailure { best_residual: f64, location: String },

    #[error("argmax result outside the control box: |u| = {value:.3e} > {bound:.3e} at {location}")]
    BoxViolation { value: f64, bound: f64, location: String },

    #[error("flow step failed: no Armijo decrease after {halvings} halvings (J = {j:.6e}, grad = {grad_norm:.3e})")]
    StepFailure { halvings: usize, j: f64, grad_norm: f64 },

    #[error("regression system is degenerate: {unvisited} of {total} grid nodes unvisited")]
    RegressionFailure { unvisited: usize, total: usize },

    #[error("unknown problem name: {0}")]
    NotFound(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed dump: {0}")]
    Format(String),
}
