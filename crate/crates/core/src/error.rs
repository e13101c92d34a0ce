use std::path::PathBuf;

use vlmdiff_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
    #[error("mask not found for anomalous image {}", .0.display())]
    MaskNotFound(PathBuf),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("caption provider failed for {}: {msg}", path.display())]
    Provider { path: PathBuf, msg: String },
    #[error("caption is {len} chars, encoder accepts at most {max}; truncate before encoding")]
    CaptionTooLong { len: usize, max: usize },
    #[error("missing caption for {}", .0.display())]
    MissingCaption(PathBuf),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{what} not found; run {command} (expected {})", path.display())]
    MissingArtifact {
        what: String,
        path: PathBuf,
        command: &'static str,
    },
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("metric: {0}")]
    Metric(String),
    #[error("feature extractor unavailable: {0}")]
    ExtractorUnavailable(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by inputs the user controls (exit code 1); everything
    /// else maps to exit code 2.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::MaskNotFound(_)
                | Error::Dataset(_)
                | Error::Config(_)
                | Error::MissingArtifact { .. }
                | Error::MissingCaption(_)
                | Error::CaptionTooLong { .. }
                | Error::ExtractorUnavailable(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
