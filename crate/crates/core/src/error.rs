use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column `{column}` not found in header")]
    MissingColumn { column: String },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("weak first stage: mean instrument contrast of the treatment is {contrast:e} (per fold: {fold_contrasts:?}); no complier mass detected")]
    WeakFirstStage {
        contrast: f64,
        fold_contrasts: Vec<f64>,
    },

    #[error("singular Jacobian (nonsingularity of the moment Jacobian is required)")]
    SingularJacobian,

    #[error(
        "degenerate labels: every instrument value is {value}; no propensity model is identifiable"
    )]
    DegenerateLabels { value: f64 },

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error(
        "balancing weight fit did not converge in fold {fold}: KKT violation {kkt_violation:e}"
    )]
    NotConverged { fold: usize, kkt_violation: f64 },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("estimation failed in fold {fold}: {source}")]
    InFold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse classification used for exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Estimation,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Estimation => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Estimation => "estimation",
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::MissingColumn { .. }
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::InvalidData(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::Shape(_)
            | Error::NonFinite(_)
            | Error::WeakFirstStage { .. }
            | Error::SingularJacobian
            | Error::DegenerateLabels { .. }
            | Error::DegenerateWeights(_)
            | Error::NotConverged { .. }
            | Error::DegenerateCovariance(_) => ErrorKind::Estimation,
            Error::InFold { source, .. } => source.kind(),
        }
    }

    pub(crate) fn in_fold(self, fold: usize) -> Error {
        match self {
            e @ Error::InFold { .. } => e,
            e => Error::InFold {
                fold,
                source: Box::new(e),
            },
        }
    }

    /// Strips fold context, returning the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFold { source, .. } => source.root(),
            e => e,
        }
    }
}
