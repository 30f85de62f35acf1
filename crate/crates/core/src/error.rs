use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something that can never succeed as given.
    #[error("invalid input: {0}")]
    Input(String),

    /// Provider could not be reached or answered with a transient failure.
    #[error("transport error from {provider}: {message}")]
    Transport { provider: String, message: String },

    /// Provider or database configuration is inconsistent (wrong dims, missing endpoint).
    #[error("configuration error: {0}")]
    Config(String),

    /// A vision model reply could not be turned into a critique.
    #[error("augmentation failed for {asset}: {message}")]
    Augmentation { asset: String, message: String },

    /// Uploaded media is not a PNG or JPEG image.
    #[error("unsupported media: {0}")]
    UnsupportedMedia(String),

    /// The critic found nothing to say about a query image.
    #[error("image analysis is empty: {0}")]
    EmptyAnalysis(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("database format: {0}")]
    Format(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Only transport failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
