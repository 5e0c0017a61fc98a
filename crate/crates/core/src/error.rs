use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, bad hyperparameters, unsupported layer kinds.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed checkpoint, bitstream or dataset bytes.
    #[error("format error: {0}")]
    Format(String),
    #[error("incompatible model: expected digest {expected}, got {actual}")]
    IncompatibleModel { expected: String, actual: String },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error (code {code}): {message}")]
    Remote { code: u8, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}
