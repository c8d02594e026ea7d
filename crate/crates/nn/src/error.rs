use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] charformer_core::Error),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss at iteration {iteration}: {terms}")]
    NonFiniteLoss { iteration: u64, terms: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),
}

impl Error {
    pub(crate) fn checkpoint(path: &std::path::Path, reason: impl std::fmt::Display) -> Self {
        Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
