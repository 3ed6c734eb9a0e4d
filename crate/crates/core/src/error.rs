use std::io;

use thiserror::Error;

/// Errors raised anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance matrix is not positive definite: {0}")]
    CovarianceNotPD(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parameters are not representable by this model: {0}")]
    NotRepresentable(String),
    #[error("invalid partition layout: {0}")]
    Layout(String),
    #[error("protocol order violated: {0}")]
    ProtocolOrder(String),
    #[error("rank condition failed: {0}")]
    Rank(String),
    #[error("transport timed out after {timeout_ms} ms ({context})")]
    TransportTimeout { timeout_ms: u64, context: String },
    #[error("protocol aborted: {0}")]
    ProtocolAborted(String),
    #[error("replay failed: {0}")]
    Replay(String),
    #[error("audit failed: {0}")]
    Audit(String),
    #[error("malformed message: {0}")]
    Codec(String),
    #[error("row alignment failed: {0}")]
    Alignment(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
