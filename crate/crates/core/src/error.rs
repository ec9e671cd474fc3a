//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by grid construction, parameter validation, solvers and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),

    #[error("parameters: {0}")]
    Params(String),

    #[error("config {path}: {message}")]
    Config { path: String, message: String },

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("linear solver stalled after {iterations} iterations (relative residual {residual:.3e}, tolerance {tolerance:.3e})")]
    SolverStall {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("time step: {0}")]
    TimeStep(String),

    #[error("verification: {0}")]
    Verify(String),

    #[error("snapshot {path}: {message}")]
    Snapshot { path: String, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
