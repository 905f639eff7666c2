use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("event at line {line} has coordinate ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        line: usize,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("timestamp at line {line} goes backwards ({t} < {previous})")]
    NonMonotone { line: usize, t: f64, previous: f64 },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-positive depth {depth} at pixel ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize, depth: f64 },

    #[error("insufficient events: {found} found, at least {required} required")]
    InsufficientEvents { found: usize, required: usize },

    #[error("no valid depth: {0}")]
    NoValidDepth(String),

    #[error("time {t} outside trajectory span [{start}, {end}]")]
    OutsideSpan { t: f64, start: f64, end: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
