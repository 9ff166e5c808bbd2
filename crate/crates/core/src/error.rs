use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CrabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrabError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure at epoch {epoch}, step {step}: {detail}")]
    Numeric {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CrabError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        CrabError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front-end:
    /// 2 configuration, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CrabError::Config(_) | CrabError::Json(_) => 2,
            CrabError::Data(_) | CrabError::Format { .. } | CrabError::Io { .. } => 3,
            CrabError::Numeric { .. } | CrabError::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
