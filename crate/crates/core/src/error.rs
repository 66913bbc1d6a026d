use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Each variant maps onto one stable
/// category string (see [`Error::category`]) which the CLI prints as a prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{context}: expected width {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate grid position ({row}, {col}) in slide `{slide_id}`")]
    DuplicatePosition { slide_id: String, row: u32, col: u32 },

    #[error("unknown label kind `{0}`")]
    UnknownLabelKind(String),

    #[error("format version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("{0}")]
    Invalid(String),

    #[error("{0}")]
    SingleClass(String),

    #[error("{0}")]
    MissingLabels(String),

    #[error("{0}")]
    Numerical(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::DuplicatePosition { .. } => "duplicate-position",
            Error::UnknownLabelKind(_) => "unknown-label-kind",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Invalid(_) => "invalid-input",
            Error::SingleClass(_) => "single-class",
            Error::MissingLabels(_) => "missing-labels",
            Error::Numerical(_) => "numerical",
        }
    }

    /// True for failures of the arithmetic itself rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
