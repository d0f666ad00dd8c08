use std::path::PathBuf;

/// Errors surfaced by the pipeline and its building blocks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed for sentence {sentence_id}: {message}")]
    Validation { sentence_id: String, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("mock script has no entry for request digest {digest}")]
    Scripting { digest: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config digest mismatch: {0}")]
    DigestMismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
