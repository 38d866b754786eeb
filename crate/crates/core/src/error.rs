use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("degenerate geometry at step {step}: environment agent coincides with ego agent")]
    DegenerateGeometry { step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("invalid closed-loop gain kappa = {0}; the explicit update requires 0 <= kappa < 1")]
    InvalidGain(f64),

    #[error("zero perturbation: finite-difference step must be positive")]
    ZeroPerturbation,

    #[error("sensitivity unavailable: {0}")]
    SensitivityUnavailable(String),

    #[error("no safe radius in [{low}, {high}]: r_max violates the implicit safety requirement")]
    NoSafeRadius { low: f64, high: f64 },

    #[error("planning problem infeasible at radius {radius}: {reason}")]
    Infeasible { radius: f64, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is a run-time abort (as opposed to bad input).
    pub fn is_runtime_abort(&self) -> bool {
        matches!(
            self,
            Error::Infeasible { .. }
                | Error::NoSafeRadius { .. }
                | Error::SensitivityUnavailable(_)
                | Error::DegenerateGeometry { .. }
                | Error::InsufficientSamples(_)
        )
    }
}
