use std::path::PathBuf;

use crate::objectives::TermBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, batch sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at step {step}: non-finite loss (last finite terms: {last_finite:?})")]
    Divergence {
        step: u64,
        breakdown: Box<TermBreakdown>,
        last_finite: Option<Box<TermBreakdown>>,
    },

    #[error("{context} `{path}`: {source}")]
    Io {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint `{path}`: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("dataset ingestion failed: {0}")]
    Ingestion(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context,
            path: path.into(),
            source,
        }
    }
}
