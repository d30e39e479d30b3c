use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank error in {op}: expected {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("parameter `{0}` has no gradient")]
    UninitializedGradient(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}:{line}: missing required field `{field}`")]
    Schema {
        path: PathBuf,
        line: usize,
        field: &'static str,
    },

    #[error("not enough negative candidates: need {needed_foreign} foreign + {needed_body} body, have {have_foreign} foreign + {have_body} body")]
    Shortfall {
        needed_foreign: usize,
        needed_body: usize,
        have_foreign: usize,
        have_body: usize,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
