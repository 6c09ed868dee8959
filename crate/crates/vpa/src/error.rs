//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VpaError {
    /// Tensor shape mismatch; message reports both shapes involved.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid hyper-parameter (tau <= 0, eta out of range, ...).
    #[error("invalid parameter: {0}")]
    Param(String),
    /// Invalid configuration (regime/lifecycle pair, prompt placement, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an API contract (non-scalar loss, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Numeric failure during optimization (NaN loss or gradient).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Malformed container file.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl VpaError {
    /// Process exit code for the CLI: config/usage errors, numeric
    /// failures, and i/o failures are distinguishable by code.
    pub fn exit_code(&self) -> i32 {
        match self {
            VpaError::Param(_) | VpaError::Config(_) | VpaError::Contract(_) => 2,
            VpaError::Shape(_) | VpaError::Numeric(_) => 3,
            VpaError::Format { .. } | VpaError::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, VpaError>;
