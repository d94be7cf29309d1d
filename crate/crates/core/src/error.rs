use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index {index} out of range for {len} sessions")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate regression: truth covariance is rank deficient along {directions:?}")]
    Degenerate { directions: Vec<[f64; 3]> },

    #[error("optimization diverged at stage {stage}, iteration {iteration}: non-finite {term}")]
    Divergence {
        stage: usize,
        iteration: usize,
        term: String,
    },

    #[error("synthetic deformation folded (min Jacobian determinant {min_det:.4} at session {session})")]
    Folding { session: usize, min_det: f64 },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by malformed user input (files, manifests, configs).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Io { .. }
                | Error::Json { .. }
                | Error::InvalidArgument(_)
                | Error::GridMismatch(_)
                | Error::IndexOutOfRange { .. }
        )
    }
}
