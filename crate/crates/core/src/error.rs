use std::path::Path;

use crate::corpus::CorpusError;
use crate::metrics::MetricsError;
use crate::numeric::NumericError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown criterion {name}; known criteria: {}", known.join(", "))]
    UnknownCriterion { name: String, known: Vec<String> },
    #[error("unknown bigram {0}")]
    UnknownBigram(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: u64, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Numeric(_) => "numeric",
            Error::Corpus(CorpusError::Io { .. }) | Error::Io { .. } => "io",
            Error::Corpus(_) => "corpus",
            Error::Metrics(_) => "metrics",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::UnknownCriterion { .. } => "unknown-criterion",
            Error::UnknownBigram(_) => "unknown-bigram",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}
