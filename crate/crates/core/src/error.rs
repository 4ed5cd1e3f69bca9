use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("no word survives stoplist and document-frequency filtering")]
    EmptyVocabulary,
    #[error("read failed: {0}")]
    Io(String),
}

impl CorpusError {
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("unknown code {0}")]
    UnknownCode(u64),
    #[error("unknown theme {0}")]
    UnknownTheme(u64),
    #[error("selection covers no codable word")]
    EmptySelection,
    #[error("span {start}..{end} lies outside the document ({len} chars)")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("code label is empty")]
    InvalidLabel,
    #[error("no automatic annotation of code {code_id} on document {doc_id:?}")]
    NotFound { doc_id: String, code_id: u64 },
    #[error("code {code_id} already belongs to theme {theme_id}")]
    SelfMerge { theme_id: u64, code_id: u64 },
    #[error("theme {0} has a single code and cannot be split")]
    LastCode(u64),
    #[error("code {code_id} is not in theme {theme_id}")]
    NotInTheme { theme_id: u64, code_id: u64 },
    #[error("malformed annotation file: {0}")]
    Format(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("model needs at least one topic")]
    NoTopics,
    #[error("every word of topic {0} is forbidden")]
    AllForbidden(usize),
    #[error("non-finite bound: {0}")]
    NonFinite(String),
    #[error("topic {0} is free; only themed topics can be merged")]
    FreeTopicMerge(usize),
    #[error("cannot merge topic {0} with itself")]
    SameTopic(usize),
    #[error("topic {0} does not exist")]
    TopicOutOfRange(usize),
    #[error("topic {0} has a single code and cannot be split")]
    LastCode(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("document {0:?} is not part of the training corpus")]
    UnknownDocument(String),
    #[error("training cancelled")]
    Cancelled,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("no trained model has been published yet")]
    StaleModel,
    #[error("theme {0} is not bound to a topic in the current model")]
    UnboundTheme(u64),
    #[error("topic {0} does not exist")]
    TopicOutOfRange(usize),
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("invalid query: {0}")]
    Invalid(String),
}
