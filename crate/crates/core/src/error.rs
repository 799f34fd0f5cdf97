use std::path::PathBuf;

use crate::backend::BackendError;
use crate::stats::StatsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error: {message}")]
    Parse { message: String, raw: String },
    #[error("expected {expected} scenario blocks, parsed {got}")]
    PartialParse {
        expected: usize,
        got: usize,
        raw: String,
    },
    #[error("answer sheet for {subject_id} is unscoreable: too many missing answers on {dimension}")]
    Unscoreable {
        subject_id: String,
        dimension: crate::BigFiveDim,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("refusing to resume: {0}")]
    RefuseResume(String),
    #[error("stage `{stage}` is not complete: {detail}")]
    MissingStage { stage: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn parse(message: impl Into<String>, raw: impl Into<String>) -> Self {
        Error::Parse {
            message: message.into(),
            raw: raw.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 backend/transport, 3 analysis.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend(_) => 2,
            Error::Stats(_) | Error::Unscoreable { .. } => 3,
            _ => 1,
        }
    }
}
