use std::fmt;
use std::io;

/// Errors produced anywhere in the crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape mismatch; the message names the offending shapes.
    Shape(String),
    /// Invalid or inconsistent configuration; one entry per offending key.
    Config(Vec<String>),
    /// Checkpoint persistence failure (corruption, truncation, bad manifest).
    Checkpoint(String),
    /// Synthetic task / tokenizer failure.
    Task(String),
    /// Training aborted (divergence, missing artifacts, bad stage wiring).
    Train(String),
    /// Loss became non-finite at the given optimizer step.
    NonFiniteLoss { step: usize },
    /// A gradient became non-finite for the named parameter.
    NonFiniteGrad { param: String },
    Io(io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape(msg) => write!(f, "shape error: {msg}"),
            Self::Config(keys) => write!(f, "invalid config: {}", keys.join("; ")),
            Self::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Self::Task(msg) => write!(f, "task error: {msg}"),
            Self::Train(msg) => write!(f, "training error: {msg}"),
            Self::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Self::NonFiniteGrad { param } => write!(f, "non-finite gradient for parameter {param}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            Self::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}
