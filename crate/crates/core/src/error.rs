use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown distortion `{0}`")]
    UnknownDistortion(String),

    #[error("distortion `{0}` appears more than once in the sequence")]
    DuplicateDistortion(String),

    #[error("kernel `{kernel}` produced a non-finite value")]
    KernelNumerical { kernel: &'static str },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("graph state: {0}")]
    GraphState(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("artifact mismatch: {what} (expected {expected}, found {found})")]
    DigestMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::DigestMismatch { .. } | Error::UnknownDistortion(_) => {
                ErrorClass::Config
            }
            Error::KernelNumerical { .. } | Error::Numerical(_) => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
            Error::DuplicateDistortion(_)
            | Error::Shape { .. }
            | Error::GraphState(_)
            | Error::Invariant(_)
            | Error::DegenerateInput(_)
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Image { .. } => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
