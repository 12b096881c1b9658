use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric range exceeded: {0}")]
    NumericRange(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("model error: {0}")]
    Model(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("timed out after {seconds} s waiting for client(s) {clients:?} in round {round}")]
    Timeout {
        round: u32,
        clients: Vec<u32>,
        seconds: u64,
    },

    /// A federated run stopped early; `trace` holds the completed rounds.
    #[error("run aborted after {} completed round(s): {source}", trace.records.len())]
    Aborted {
        trace: Box<crate::consensus::ConvergenceTrace>,
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("transport: {0}")]
    Transport(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
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
