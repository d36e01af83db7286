use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A JSON-lines record could not be parsed.
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },

    #[error("unknown item id {item_id} ({context})")]
    UnknownItem { item_id: u32, context: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty text cannot be embedded")]
    EmptyText,

    #[error("embedding batch failed at indices {indices:?}: {message}")]
    Batch { indices: Vec<usize>, message: String },

    /// A remote service kept failing after the retry budget was spent.
    #[error("remote call to {endpoint} failed after {attempts} attempt(s): {message}")]
    Remote {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("embedding store: {0}")]
    Store(String),

    #[error("non-finite value in `{field}` at index {index}")]
    NonFinite { field: &'static str, index: usize },

    #[error("episode {episode_id}: {message}")]
    Schema { episode_id: String, message: String },

    #[error("policy error: {0}")]
    Policy(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure came from a remote service rather than from local data.
    pub fn is_remote(&self) -> bool {
        matches!(self, Error::Remote { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
