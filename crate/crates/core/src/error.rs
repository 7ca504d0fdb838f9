use thiserror::Error;

/// Errors raised by the engine. Validation problems map to CLI exit code 2,
/// numerical non-convergence to exit code 3.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum XvaError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl XvaError {
    pub fn validation(msg: impl Into<String>) -> Self {
        XvaError::Validation(msg.into())
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            XvaError::NonConvergence { .. } | XvaError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, XvaError>;
