use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("trace exhausted: no recorded step {0}")]
    EndOfTrace(usize),

    #[error("trace divergence at step {step}: {detail}")]
    TraceDivergence { step: usize, detail: String },

    #[error("trace format error: {0}")]
    Format(String),

    #[error("trace corrupted at byte offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("generation failed at step {step}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Unwraps [`Error::AtStep`] layers down to the originating error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}
