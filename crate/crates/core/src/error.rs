use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("softmax row {0} has no attendable position")]
    FullyMaskedRow(usize),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label of length {label_len} needs {needed} frames, only {frames} available")]
    InfeasibleAlignment {
        label_len: usize,
        needed: usize,
        frames: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated payload ({what})")]
    Truncated { path: PathBuf, what: String },

    #[error("{path}: {what}")]
    Malformed { path: PathBuf, what: String },

    #[error("{path}:{line}: {what}")]
    Manifest {
        path: PathBuf,
        line: usize,
        what: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// bad or missing data, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::BadMagic { .. }
            | Error::BadVersion { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. }
            | Error::Manifest { .. }
            | Error::Io { .. }
            | Error::TokenOutOfRange { .. }
            | Error::InfeasibleAlignment { .. } => 3,
            _ => 1,
        }
    }
}
