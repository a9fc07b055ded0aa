use std::io;

use thiserror::Error;

/// Errors raised anywhere in the network, data pipeline or trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("state error: {0}")]
    State(String),
    #[error("missing tape: {0}")]
    MissingTape(String),
    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("index error: {0}")]
    Index(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
