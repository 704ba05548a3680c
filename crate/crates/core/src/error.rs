use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate placement: {0}")]
    DegeneratePlacement(String),

    #[error("invalid switch configuration: {0}")]
    InvalidSwitch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value at graph node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("matrix of size {0} is too large for exhaustive search")]
    TooLarge(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Stable machine-readable category, also used for process exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) | Error::Config(_) => "config",
            Error::IndexOutOfRange { .. } | Error::DimensionMismatch(_) => "dimension",
            Error::DegeneratePlacement(_) => "geometry",
            Error::InvalidSwitch(_) => "structure",
            Error::NonFinite { .. } | Error::Diverged(_) => "numeric",
            Error::TooLarge(_) => "limit",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "dimension" => 3,
            "geometry" => 4,
            "structure" => 5,
            "numeric" => 6,
            "limit" => 7,
            "io" => 8,
            _ => 9,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
