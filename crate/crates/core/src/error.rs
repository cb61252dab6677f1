use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory for question {question_id} contains no tool call")]
    NotToolUsing { question_id: u32 },

    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),

    #[error("malformed trajectory: {0}")]
    Grammar(String),

    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("advantage requested for an empty group")]
    EmptyGroup,

    #[error("unmasked step {step} of trajectory for question {question_id} has no rollout log-probability")]
    MissingLogProb { question_id: u32, step: usize },

    #[error("source rollout {index} is not in a group of {size}")]
    SourceNotInGroup { index: usize, size: usize },

    #[error("step {step} of {stream} would receive a second advantage")]
    ConflictingAssignment { stream: String, step: usize },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("question {question_id} has {available} rollouts, pass@{k} needs at least {k}")]
    InsufficientRollouts {
        question_id: u32,
        available: usize,
        k: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("run directory {0} is missing or incomplete")]
    MissingRun(PathBuf),

    #[error("runs are not comparable: {0}")]
    ConfigMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}
