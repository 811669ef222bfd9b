use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("audio too short: {samples} samples, need at least {window}")]
    TooShort { samples: usize, window: usize },

    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible segmentation: k = {k} exceeds {cells} cells")]
    Infeasible { k: usize, cells: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    /// Retryable failure talking to a remote oracle.
    #[error("transport error: {0}")]
    Transport(String),

    /// The remote side answered but broke the wire contract. Not retryable.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("oracle failed at iteration {iteration}: {source}")]
    Oracle {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty result: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Transport(_) => true,
            Error::Oracle { source, .. } => source.is_retryable(),
            _ => false,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Oracle {
            iteration,
            source: Box::new(self),
        }
    }
}
