use std::path::PathBuf;

use thiserror::Error;

use crate::compose::ProviderKind;

pub type Result<T, E = CvrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CvrError {
    #[error("vector norm is zero or below 1e-12")]
    ZeroVector,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("duplicate clip id `{0}`")]
    DuplicateId(String),

    #[error("unknown clip `{0}`")]
    MissingClip(String),

    #[error("missing embedding: {0}")]
    MissingEmbedding(String),

    #[error("strategy `{0}` cannot be resolved here")]
    UnsupportedStrategy(String),

    #[error("clip `{clip}` has invalid span [{start}, {end})")]
    InvalidSpan { clip: String, start: f64, end: f64 },

    #[error("query `{query}` references target `{target}` that is not in the manifest")]
    MissingTarget { query: String, target: String },

    #[error("no ground-truth narration for clip `{0}`")]
    MissingNarration(String),

    #[error("{kind} provider unavailable: {reason}")]
    ProviderUnavailable { kind: ProviderKind, reason: String },

    #[error("{kind} provider returned a malformed response: {reason}")]
    MalformedResponse { kind: ProviderKind, reason: String },

    #[error("{kind} provider returned an empty response")]
    EmptyResponse { kind: ProviderKind },

    #[error("provider is configured as {actual}, but {expected} is required")]
    WrongProviderKind {
        expected: ProviderKind,
        actual: ProviderKind,
    },

    #[error("no {0} provider configured")]
    ProviderNotConfigured(ProviderKind),

    #[error("{path}: {location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CvrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CvrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        CvrError::Format {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    /// Whether this error came from an external provider rather than from the
    /// configuration or the data.
    pub fn is_provider_error(&self) -> bool {
        matches!(
            self,
            CvrError::ProviderUnavailable { .. }
                | CvrError::MalformedResponse { .. }
                | CvrError::EmptyResponse { .. }
        )
    }
}
