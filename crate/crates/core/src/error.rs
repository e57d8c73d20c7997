use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KpeError>;

#[derive(Debug, Error)]
pub enum KpeError {
    #[error("{path}: line {line}: {message}")]
    Load {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: empty corpus file")]
    EmptyCorpus { path: PathBuf },

    #[error("duplicate document id {0:?} in split")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range for {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("document {doc_id:?}: expected {expected} embedding rows, found {actual}")]
    TokenCountMismatch {
        doc_id: String,
        expected: usize,
        actual: usize,
    },

    #[error("no embeddings for document {0:?}")]
    MissingDocument(String),

    #[error("no prediction row for document {0:?}")]
    MissingPrediction(String),

    #[error("document {0:?} has no BIO labels")]
    Unlabeled(String),

    #[error("non-finite loss at epoch {epoch}: {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("bad {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("stage {stage} failed for document {doc_id:?}")]
    Stage {
        stage: &'static str,
        doc_id: String,
        #[source]
        source: Box<KpeError>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KpeError {
    pub(crate) fn at_stage(self, stage: &'static str, doc_id: &str) -> Self {
        KpeError::Stage {
            stage,
            doc_id: doc_id.to_owned(),
            source: Box::new(self),
        }
    }
}
