//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Kernel received tensors whose shapes do not conform.
    #[error("shape mismatch in {kernel}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A forward kernel produced (or received) NaN/Inf.
    #[error("non-finite value in {kernel}")]
    NonFinite { kernel: &'static str },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or generator configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training diverged or an abort gate fired.
    #[error("training error at {step}: {reason}")]
    Training { step: String, reason: String },

    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    /// A manifest references an image that is not on disk.
    #[error("referential integrity: missing image for individual {id}")]
    MissingImage { id: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn training(step: impl Into<String>, reason: impl Into<String>) -> Self {
        CoreError::Training {
            step: step.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
