use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input width does not match what a layer expects.
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or a failed factorization.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The left nullspace of a Jacobian is empty, so no normal direction exists.
    #[error("no normal direction: the left nullspace is empty")]
    NoNormalDirection,

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
