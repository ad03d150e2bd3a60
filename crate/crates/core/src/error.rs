use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Sequences that must share a time axis do not.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("config error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Wrong magic, version or header layout.
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    /// Payload length disagrees with the header.
    #[error("truncation error in {}: {msg}", path.display())]
    Truncated { path: PathBuf, msg: String },

    /// Non-finite or otherwise invalid values.
    #[error("data error in {}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Non-finite loss during training.
    #[error("training diverged at {0}")]
    Divergence(String),

    /// The batch carries no usable CCC gradient (e.g. constant targets).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
