use std::io;

use thiserror::Error;

/// Every failure the cycle can surface, grouped by category.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("capacity error: needed {needed} examples, only {available} available")]
    Capacity { needed: usize, available: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cycle {cycle}, phase `{phase}`: {source}")]
    Phase {
        cycle: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Process exit code for the CLI, one per category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Format(_) => 3,
            Error::Consistency(_) => 4,
            Error::Capacity { .. } => 5,
            Error::Parameter(_) => 6,
            Error::Divergence { .. } => 7,
            Error::State(_) => 8,
            Error::Config(_) => 9,
            Error::Phase { source, .. } => source.exit_code(),
        }
    }

    /// Short category name, used as the diagnostic prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Consistency(_) => "consistency",
            Error::Capacity { .. } => "capacity",
            Error::Parameter(_) => "parameter",
            Error::Divergence { .. } => "divergence",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::Phase { source, .. } => source.category(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
