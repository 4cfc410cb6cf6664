use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("size error: requested {requested} but only {available} available")]
    Size { requested: usize, available: usize },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("numeric fault at {}: {message}", describe_layer(.layer))]
    Numeric { layer: Option<usize>, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Size { .. } => "size",
            Error::Parse { .. } => "parse",
            Error::EmptyInput(_) => "empty_input",
            Error::Numeric { .. } => "numeric",
            Error::Integrity(_) => "integrity",
            Error::Version { .. } => "version",
            Error::State(_) => "state",
            Error::Protocol(_) => "protocol",
            Error::Comparison(_) => "comparison",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the error stems from bad user configuration rather than a
    /// failure while running an experiment.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::Json(_) | Error::Version { .. }
        )
    }
}

fn describe_layer(layer: &Option<usize>) -> String {
    match layer {
        Some(i) => format!("layer {i}"),
        None => "embedding/head".to_string(),
    }
}
