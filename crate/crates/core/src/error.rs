//! Crate-wide error type.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Malformed input line while parsing a trajectory file.
    Parse { line: usize, msg: String },
    /// Two records share the same (frame_id, agent_id) key.
    DuplicateRecord { frame_id: i64, agent_id: i64 },
    /// Train/test split cannot be performed (e.g. fewer than 2 agents).
    Split(String),
    /// Tensor shape mismatch in a numeric operation.
    Shape(String),
    /// A numeric operation produced NaN or infinity.
    NonFinite(String),
    /// Misuse of the autodiff tape (e.g. backward from a non-scalar).
    Grad(String),
    /// Invalid configuration value or key.
    Config(String),
    /// Checkpoint file is missing, corrupt, or incompatible with the config.
    Checkpoint(String),
    /// Training aborted (divergence, empty batch stream, ...).
    Train(String),
    /// Evaluation could not run (empty test stream, too few feature rows, ...).
    Eval(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::DuplicateRecord { frame_id, agent_id } => {
                write!(f, "duplicate record for frame {frame_id}, agent {agent_id}")
            }
            Error::Split(msg) => write!(f, "split error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::NonFinite(msg) => write!(f, "numeric error: {msg}"),
            Error::Grad(msg) => write!(f, "autodiff error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Train(msg) => write!(f, "training error: {msg}"),
            Error::Eval(msg) => write!(f, "evaluation error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// True for errors caused by bad user input (config, CLI usage) rather
    /// than a runtime/numeric failure. The CLI maps these to exit code 1,
    /// everything else to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DuplicateRecord { .. }
                | Error::Config(_)
                | Error::Split(_)
        )
    }
}
