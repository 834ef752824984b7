use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric fault in `{op}` (tape node {node}){context}")]
    NumericFault {
        op: &'static str,
        node: usize,
        context: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("degenerate rotation: quaternion norm {0:e} below 1e-12")]
    DegenerateRotation(f64),

    #[error("system has {molecules} molecules, slot capacity is {capacity}")]
    Capacity { molecules: usize, capacity: usize },

    #[error("correlation undefined: {0} has zero variance")]
    UndefinedCorrelation(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used for CLI exit reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::NumericFault { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::DegenerateSplit(_) => "split",
            Error::DegenerateRotation(_) => "numeric",
            Error::Capacity { .. } => "capacity",
            Error::UndefinedCorrelation(_) => "metrics",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attaches extra context to a numeric fault; other variants pass through.
    pub fn with_context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::NumericFault { op, node, context } => Error::NumericFault {
                op,
                node,
                context: format!("{context} [{ctx}]"),
            },
            other => other,
        }
    }
}
