//! Error taxonomy shared by every module.
//!
//! The split matters to the CLI, which maps each class to a distinct exit
//! code: configuration and structural problems, numeric failures, and I/O.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up (matmul, elementwise ops, merges).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Configuration rejected before any computation ran.
    #[error("invalid config: {0}")]
    Config(String),

    /// A model, checkpoint, or weight store is internally inconsistent.
    #[error("structural error: {0}")]
    Structure(String),

    /// An iterative decomposition did not reach tolerance.
    #[error("SVD did not converge after {sweeps} sweeps")]
    NonConvergence { sweeps: usize },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A numeric precondition failed (e.g. a matrix that must be positive
    /// definite is not).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("non-finite loss at step {step}; run aborted")]
    NanLoss { step: usize },

    /// A rank bound that must hold for diagonal-scaling updates was
    /// exceeded, which indicates a corrupted update matrix.
    #[error("rank bound violated on layer {layer}: count {count} > bound {bound}")]
    RankBound {
        layer: String,
        count: usize,
        bound: usize,
    },

    /// A file exists but its contents cannot be decoded.
    #[error("parse error at byte {offset}: {message}")]
    Parse { message: String, offset: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Exit code class for the CLI: 2 config/structure, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Structure(_) => 2,
            Error::NonConvergence { .. }
            | Error::NonFinite(_)
            | Error::Numeric(_)
            | Error::NanLoss { .. }
            | Error::RankBound { .. } => 3,
            Error::Parse { .. } | Error::Io { .. } => 4,
        }
    }
}
