use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected \"SAPT\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported tensor format: {0}")]
    Unsupported(String),

    #[error("truncated tensor file {path}: expected {expected} payload bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("shape {shape:?} implies {expected} elements but data has {found}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid bundle {doc_id}: {reason}")]
    InvalidBundle { doc_id: String, reason: String },

    #[error("qrels line {line}: {reason}")]
    Qrels { line: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("oracle score retention undefined: full-index MaxSim is zero")]
    UndefinedOsr,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("layer {layer} is not available (exported layers: {available:?})")]
    MissingLayer { layer: usize, available: Vec<usize> },

    #[error("{0}")]
    Missing(String),

    #[error("document {doc}: {source}")]
    Document {
        doc: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Attaches the document that failed.
    pub fn in_document(self, doc: impl Into<String>) -> Self {
        Error::Document {
            doc: doc.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
