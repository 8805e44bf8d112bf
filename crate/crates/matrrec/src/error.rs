use thiserror::Error;

/// Errors surfaced by every public operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("item id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
