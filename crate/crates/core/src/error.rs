use std::path::PathBuf;

use thiserror::Error;

use crate::schema::ClinicId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported clinic format `{0}`")]
    UnsupportedFormat(String),

    #[error("record belongs to clinic `{record}` but format spec is for `{spec}`")]
    ClinicMismatch { record: ClinicId, spec: ClinicId },

    #[error("invalid format spec `{name}`: {reason}")]
    InvalidFormatSpec { name: String, reason: String },

    #[error("duplicate field `{0}` in raw record")]
    DuplicateField(String),

    #[error("invalid clinic id `{0}` (expected lowercase letters, digits, `_`)")]
    InvalidClinicId(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("ground truth {path}, row {row}: {reason}")]
    GroundTruth {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid generator settings: {0}")]
    GenSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
