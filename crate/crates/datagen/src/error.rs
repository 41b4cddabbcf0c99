use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by dataset generation and the teacher client.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no images found under {0}")]
    EmptyImageDir(PathBuf),
    #[error("api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("mock answer missing for key {key}")]
    MockMiss { key: String },
    #[error("teacher returned http status {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("teacher request timed out")]
    Timeout,
    #[error("transport error talking to teacher: {0}")]
    Transport(String),
    #[error("unparseable teacher response: {0}")]
    BadResponse(String),
    #[error("empty question")]
    EmptyQuestion,
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("bad split fractions: {0}")]
    BadFractions(String),
    #[error(transparent)]
    Core(#[from] maemi_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
