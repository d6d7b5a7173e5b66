use thiserror::Error;

use crate::methods::RunTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("input contract violated: {0}")]
    Contract(String),

    /// An iterate left the finite range. The trace up to the last finite row is kept.
    #[error("run diverged at iteration {iteration}")]
    Diverged {
        iteration: u64,
        trace: Box<RunTrace>,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("every grid cell diverged")]
    AllDiverged,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
