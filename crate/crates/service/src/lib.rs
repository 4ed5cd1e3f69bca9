//! Project-scoped REST API and on-disk persistence for the theme/topic
//! workbench.

pub mod api;
pub mod error;
pub mod project;
pub mod storage;
pub mod workbench;

pub use api::{router, serve, REQUEST_ID};
pub use error::{ErrorKind, Result, ServiceError};
pub use project::{DocumentView, ProjectData, TopicView};
pub use storage::{Bundle, Storage, SCHEMA_VERSION};
pub use workbench::{JobState, ProjectStatus, TrainingJob, Workbench};
