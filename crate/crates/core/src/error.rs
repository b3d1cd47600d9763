use alloc::string::String;

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("degenerate folds: {0}")]
    DegenerateFolds(String),

    #[error("SMO did not converge after {iterations} iterations (max KKT violation {violation:.3e}, tol {tol:.1e})")]
    NotConverged {
        iterations: usize,
        violation: f64,
        tol: f64,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(expected: impl core::fmt::Debug, got: impl core::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: alloc::format!("{expected:?}"),
            got: alloc::format!("{got:?}"),
        }
    }
}
