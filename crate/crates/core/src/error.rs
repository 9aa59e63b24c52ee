use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown {kind} id {id} (valid range 0..{limit})")]
    UnknownLabel {
        kind: &'static str,
        id: usize,
        limit: usize,
    },

    #[error("no samples for {kind} {id}")]
    EmptyLabel { kind: &'static str, id: usize },

    #[error("mode conflict: {0}")]
    Mode(String),

    #[error("predicted durations sum to zero; fall back to a minimum length of one frame per phoneme")]
    ZeroDuration,

    #[error("training diverged at step {step}: {term} is not finite")]
    Diverged { step: usize, term: &'static str },

    #[error("config: {0}")]
    Config(String),

    #[error("format error in {record}: {msg}")]
    Format { record: String, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn format(record: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            record: record.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
