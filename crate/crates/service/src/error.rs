use thiserror::Error;

use themetopic_core::{AnnotationError, CorpusError, EngineError, QueryError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("a training job is already running for this project")]
    Busy,
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },
}

/// Coarse classes clients can act on; each maps to one HTTP status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    NotFound,
    Conflict,
    Invalid,
    Internal,
}

impl ServiceError {
    pub fn kind(&self) -> ErrorKind {
        use AnnotationError as A;
        use QueryError as Q;
        match self {
            Self::NotFound(_) => ErrorKind::NotFound,
            Self::Busy => ErrorKind::Conflict,
            Self::Validation(_) | Self::Corpus(_) | Self::Engine(_) => ErrorKind::Invalid,
            Self::Annotation(e) => match e {
                A::UnknownDocument(_) | A::UnknownCode(_) | A::UnknownTheme(_) | A::NotFound { .. } => {
                    ErrorKind::NotFound
                }
                _ => ErrorKind::Invalid,
            },
            Self::Query(e) => match e {
                Q::StaleModel => ErrorKind::Conflict,
                Q::UnboundTheme(_) | Q::TopicOutOfRange(_) | Q::UnknownDocument(_) => ErrorKind::NotFound,
                Q::Invalid(_) => ErrorKind::Invalid,
            },
            Self::Storage(_) | Self::VersionMismatch { .. } => ErrorKind::Internal,
        }
    }

    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            Self::NotFound(_) => "not_found",
            Self::Busy => "busy",
            Self::Validation(_) => "validation",
            Self::Corpus(CorpusError::Parse { .. }) => "parse_error",
            Self::Corpus(CorpusError::DuplicateId(_)) => "duplicate_id",
            Self::Corpus(_) => "corpus",
            Self::Annotation(AnnotationError::EmptySelection) => "empty_selection",
            Self::Annotation(AnnotationError::SelfMerge { .. }) => "self_merge",
            Self::Annotation(AnnotationError::LastCode(_)) => "last_code",
            Self::Annotation(AnnotationError::SpanOutOfRange { .. }) => "span_out_of_range",
            Self::Annotation(_) if self.kind() == ErrorKind::NotFound => "not_found",
            Self::Annotation(_) => "annotation",
            Self::Engine(EngineError::NoTopics) => "no_topics",
            Self::Engine(_) => "engine",
            Self::Query(QueryError::StaleModel) => "stale_model",
            Self::Query(QueryError::TopicOutOfRange(_)) => "topic_out_of_range",
            Self::Query(QueryError::UnboundTheme(_)) => "unbound_theme",
            Self::Query(_) if self.kind() == ErrorKind::NotFound => "not_found",
            Self::Query(_) => "validation",
            Self::Storage(_) => "storage",
            Self::VersionMismatch { .. } => "version_mismatch",
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        Self::Storage(e.to_string())
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
