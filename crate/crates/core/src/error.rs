use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid target {target} for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },
    #[error("invalid reduction: backward needs a scalar loss, got shape {0:?}")]
    InvalidReduction(Vec<usize>),
    #[error("uninitialized gradient for parameter `{0}`")]
    UninitializedGradient(String),
    #[error("invalid id {id} (table has {rows} rows)")]
    InvalidId { id: usize, rows: usize },
    #[error("sequence length {len} exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("candidate pool too small: {available} uninteracted items, {needed} needed")]
    PoolTooSmall { available: usize, needed: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
