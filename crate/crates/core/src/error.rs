use thiserror::Error;

/// Errors raised anywhere in the feedback pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("power iteration did not converge (relative residual {residual:e})")]
    Convergence { residual: f64 },
    #[error("subband {subband}: {source}")]
    AtSubband {
        subband: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite value produced by {0}")]
    Numeric(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
