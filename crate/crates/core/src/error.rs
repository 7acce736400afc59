use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: u8, classes: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Non-finite value encountered during training or evaluation.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite(_) | Error::DegenerateInput(_) => 3,
            Error::Io(_) | Error::Format(_) => 4,
            _ => 1,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
