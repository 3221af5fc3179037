use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("cannot take a smoothed prediction from zero votes")]
    EmptyVotes,

    #[error("cannot classify an empty token set")]
    EmptyTokens,

    #[error("enumeration needs {needed} steps, over the budget of {limit}; use the closed form instead")]
    Budget { needed: u128, limit: u128 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at batch {batch}: loss {loss}")]
    Divergence { batch: usize, loss: f32 },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
