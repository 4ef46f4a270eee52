use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (index, length, shape).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient entropy: need {needed} bytes, source yielded {available}")]
    InsufficientEntropy { needed: usize, available: usize },

    #[error("configuration error: {0}")]
    Config(String),

    /// Calibration data cannot support a secure estimate.
    #[error("invalid calibration: {0}")]
    Calibration(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("extraction ratio too aggressive: j = {j} exceeds k*h_min/n = {bound:.3}")]
    RatioTooAggressive { j: usize, bound: f64 },

    #[error("insufficient data for {test}: need at least {needed}, got {got}")]
    InsufficientData {
        test: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io_at(offset: u64, source: io::Error) -> Self {
        Error::Io { offset, source }
    }
}

impl From<io::Error> for Error {
    fn from(source: io::Error) -> Self {
        Error::Io { offset: 0, source }
    }
}
