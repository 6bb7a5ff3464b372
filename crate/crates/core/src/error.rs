use thiserror::Error;

/// Error type shared across the pipeline.
///
/// The variants map onto the CLI exit codes: `Config` -> 2, `Data` and
/// `Io` -> 3, `Contract` -> 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad or missing configuration (unknown keys, checkpoint/config mismatch).
    #[error("config error: {0}")]
    Config(String),
    /// Invalid data at runtime (NaN losses, malformed files, empty masks).
    #[error("data error: {0}")]
    Data(String),
    /// A caller violated an operation contract (shape or range).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
