//! Semi-supervised variational LDA.
//!
//! Manual codes seed the initial topics and clamp the responsibilities of
//! the words they cover; deleted automatic codes pin responsibilities (and
//! optionally topic probabilities) to zero.

mod fit;
mod inference;
mod init;
mod model;
mod suggest;

pub use fit::{fit, fit_with, FitObserver, FitOutput, IterationView};
pub use inference::{
    e_step_document, elbo, global_exclusions, m_step, penalized_elbo, topic_log_prior, Maximized,
};
pub use init::{align_previous, free_rows, initialize_model, merge_topics, seeded_row, split_topic};
pub use model::{
    theta_from_gamma, DocTopicState, FitTrace, Snapshot, ThemeSeed, TopicMeta, TopicModel,
    TrainConfig,
};
pub use suggest::suggest_annotations;
