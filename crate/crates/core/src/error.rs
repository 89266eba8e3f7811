use thiserror::Error;

use crate::env::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An enumeration or construction would exceed the configured leaf cap.
    #[error("size limit exceeded: {leaves} leaves > cap {cap}")]
    Size { leaves: u128, cap: u64 },

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// Tried to act from a leaf.
    #[error("node {0} is terminal")]
    Terminal(NodeId),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A contract between components was broken (e.g. off-policy entry in strict mode).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("random stream exhausted after {0} draws")]
    RngExhausted(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
