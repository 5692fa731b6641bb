use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("length error in {path}: expected {expected} bytes, found {actual}")]
    Length {
        path: PathBuf,
        expected: String,
        actual: u64,
    },

    #[error("data error in {path}: non-finite value at row {row}")]
    NonFinite { path: PathBuf, row: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: non-finite values in {field}")]
    Numeric { field: &'static str },

    #[error("run diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: impl ToString, rhs: impl ToString) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for configuration problems, 3 for
    /// unreadable or malformed input files, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::UnknownKey(_) | Error::Shape { .. } => 2,
            Error::Format { .. }
            | Error::Length { .. }
            | Error::NonFinite { .. }
            | Error::Data(_)
            | Error::Io { .. } => 3,
            Error::Numeric { .. } | Error::Diverged { .. } => 1,
        }
    }

    /// True for errors raised while decoding an input file.
    pub fn is_format_error(&self) -> bool {
        self.exit_code() == 3
    }
}
