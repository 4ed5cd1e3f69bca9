//! Building blocks of the theme/topic workbench: corpus ingestion, the
//! qualitative coding store, a constrained variational LDA engine and
//! topic-driven queries.

pub mod annotation;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod query;
pub mod synth;

pub use annotation::{
    derive_constraints, Annotation, AnnotationStore, Code, CodeId, ConstraintSet, DocConstraints,
    Origin, Theme, ThemeId,
};
pub use corpus::{Corpus, CorpusSettings, Document, Span, Token, Vocabulary};
pub use engine::{Snapshot, ThemeSeed, TopicModel, TrainConfig};
pub use error::{AnnotationError, CorpusError, EngineError, QueryError};
