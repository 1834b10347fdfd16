use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation: {0}")]
    Validation(String),

    #[error("sampling: label `{label}` {message}")]
    Sampling { label: String, message: String },

    #[error("embedding format: {0}")]
    Format(String),

    #[error("embedding file corrupted at byte {offset}: {message}")]
    Corruption { offset: u64, message: String },

    #[error("no embeddings for sentence `{0}`")]
    MissingId(String),

    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in `{param}`")]
    NonFinite { param: String },

    #[error("loss became non-finite at episode {episode} (seed {seed})")]
    Diverged { episode: usize, seed: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Whether the failure stems from bad user input rather than a fault
    /// during execution. Drives the CLI exit status.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Format(_)
                | Error::MissingId(_)
                | Error::Sampling { .. }
                | Error::Checkpoint(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}
