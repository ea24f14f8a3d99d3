use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum MsbdError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("point outside the domain: {0}")]
    Domain(String),

    #[error("filter is not invertible: min |spectrum| = {min_magnitude:e} <= threshold {threshold:e}")]
    NonInvertibleFilter { min_magnitude: f64, threshold: f64 },

    #[error("preconditioner is not invertible: min eigenvalue {min_eigenvalue:e} <= threshold {threshold:e}")]
    NonInvertiblePreconditioner { min_eigenvalue: f64, threshold: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate step: {0}")]
    DegenerateStep(String),

    #[error("reconstruction failed: {0}")]
    Reconstruction(String),

    #[error("kernel has zero mass")]
    DegenerateKernel,

    #[error("wall-clock budget of {0:?} exceeded")]
    Timeout(std::time::Duration),

    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("parse error: {0}")]
    Parse(String),
}

impl MsbdError {
    pub(crate) fn dim(expected: usize, actual: usize) -> Self {
        MsbdError::Dimension { expected, actual }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        MsbdError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Short machine-readable tag, used in harness output.
    pub fn tag(&self) -> &'static str {
        match self {
            MsbdError::Dimension { .. } => "dimension",
            MsbdError::Shape { .. } => "shape",
            MsbdError::Parameter(_) => "parameter",
            MsbdError::Domain(_) => "domain",
            MsbdError::NonInvertibleFilter { .. } => "non_invertible_filter",
            MsbdError::NonInvertiblePreconditioner { .. } => "non_invertible_preconditioner",
            MsbdError::Numerical(_) => "numerical",
            MsbdError::DegenerateStep(_) => "degenerate_step",
            MsbdError::Reconstruction(_) => "reconstruction",
            MsbdError::DegenerateKernel => "degenerate_kernel",
            MsbdError::Timeout(_) => "timeout",
            MsbdError::Io { .. } => "io",
            MsbdError::Parse(_) => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, MsbdError>;
