use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the library.
///
/// Variants fall into three families that the command-line front end maps to
/// distinct exit codes: input/format problems, numeric failures, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sequences are not aligned: visual has {visual} rows, audio has {audio}")]
    Alignment { visual: usize, audio: usize },

    #[error("zero variance in {0}")]
    DegenerateVariance(&'static str),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite values or diverging computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::DegenerateVariance(_))
    }
}

/// Typed reader failures for the on-disk formats.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("file truncated at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("row {row}, column {column}: cannot parse {cell:?} as a number")]
    NonNumeric {
        row: usize,
        column: String,
        cell: String,
    },

    #[error("row {row}, column {column}: value {value} outside [0, 1]")]
    Range {
        row: usize,
        column: String,
        value: f64,
    },

    #[error("row {row}: timestamp {timestamp_ms} is not greater than the previous one")]
    NonAscending { row: usize, timestamp_ms: i64 },

    #[error("row {row}: expected {expected} columns, found {found}")]
    ColumnCount {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("bad header: {0}")]
    Header(String),

    #[error("no data rows")]
    Empty,

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("malformed metadata: {0}")]
    Metadata(String),
}
