use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate slice in {op}: every entry of slice {slice} is masked")]
    DegenerateSlice { op: &'static str, slice: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("marginal error: row mass {row} differs from column mass {col}")]
    Marginal { row: f64, col: f64 },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("scene spec error: {0}")]
    Spec(String),

    #[error("parse error in {what} at byte {offset}: {detail}")]
    Parse {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
