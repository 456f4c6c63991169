use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants fall into three families that the CLI maps onto exit codes:
/// validation problems with the inputs, numerical failures, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("profile too short (< {min} samples): {}", .source_ids.join(", "))]
    ProfileTooShort { source_ids: Vec<String>, min: usize },

    #[error("invalid profile {source_id}: {reason}")]
    InvalidProfile { source_id: String, reason: String },

    #[error("constant column `{0}` cannot be standardized")]
    ConstantColumn(String),

    #[error("standardization parameters do not match table: {0}")]
    ParameterMismatch(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("curve fit failed: {0}")]
    Fit(String),

    #[error("{value} is outside the fitted range [{min}, {max}]")]
    Range { value: f64, min: f64, max: f64 },

    #[error("derivative singularity: |IC| below 1e-9 at capacity {capacity}")]
    DerivativeSingularity { capacity: f64 },

    #[error("normalization degenerate: self-information of `{0}` is not positive")]
    NormalizationDegenerate(String),

    #[error("posterior factorization failed: {0}")]
    Conditioning(String),

    #[error("degenerate noise estimate: {0}")]
    DegenerateNoise(String),

    #[error("all basis functions were pruned")]
    EmptyModel,

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("no usable samples: {0}")]
    EmptyOutput(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Fit(_)
            | Error::DerivativeSingularity { .. }
            | Error::NormalizationDegenerate(_)
            | Error::Conditioning(_)
            | Error::DegenerateNoise(_)
            | Error::EmptyModel => ErrorKind::Numerical,
            Error::Io { .. } | Error::Csv(_) | Error::ModelFormat(_) => ErrorKind::Io,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }

    /// Process exit code: 2 validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Validation => 2,
            ErrorKind::Numerical => 3,
            ErrorKind::Io => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
