use std::path::PathBuf;

/// Crate-wide error type. Variants follow the failure classes surfaced by the
/// CLI: bad inputs, malformed files, numeric breakdowns, bad configuration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed something structurally wrong (shape mismatch, duplicate
    /// ids, empty input, out-of-range parameter).
    #[error("input error: {0}")]
    Input(String),

    /// A persisted artifact (bank, checkpoint, weights file) failed to parse.
    /// `offset` is the byte position where the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A computation produced non-finite values or hit a numeric singularity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration file or key problems.
    #[error("config error: {0}")]
    Config(String),

    /// Training aborted; the last good checkpoint (if any) is preserved.
    #[error("training aborted at iteration {iteration}: {message}")]
    TrainAborted {
        iteration: usize,
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
