use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotation::{CodeId, Theme, ThemeId};
use crate::error::EngineError;

/// Training hyperparameters and thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Topics not bound to any theme.
    pub k_free: usize,
    pub alpha: f64,
    pub eta: f64,
    /// Share of a seeded topic's initial mass given to its coded words.
    pub seed_mass: f64,
    pub max_em_iters: usize,
    /// Relative bound change that ends the outer loop.
    pub conv_tol: f64,
    pub doc_inner_iters: usize,
    /// Mean absolute change of gamma that ends a document's inner loop.
    pub doc_conv_tol: f64,
    pub rng_seed: u64,
    pub global_exclusion: bool,
    pub tau_token: f64,
    pub tau_doc: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_free: 5,
            alpha: 0.1,
            eta: 0.01,
            seed_mass: 0.9,
            max_em_iters: 100,
            conv_tol: 1e-5,
            doc_inner_iters: 50,
            doc_conv_tol: 1e-4,
            rng_seed: 0,
            global_exclusion: false,
            tau_token: 0.5,
            tau_doc: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_owned()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.seed_mass > 0.0 && self.seed_mass < 1.0) {
            return bad("seed_mass must lie in (0, 1)");
        }
        for (name, v) in [("tau_token", self.tau_token), ("tau_doc", self.tau_doc)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(EngineError::InvalidConfig(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.max_em_iters == 0 || self.doc_inner_iters == 0 {
            return bad("iteration limits must be at least 1");
        }
        if !(self.conv_tol > 0.0 && self.doc_conv_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        Ok(())
    }
}

/// What a topic stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TopicMeta {
    Themed {
        theme_id: ThemeId,
        name: String,
        code_ids: Vec<CodeId>,
        /// Words the theme's manual codes covered when this model was trained.
        coded_words: Vec<String>,
    },
    Free,
}

impl TopicMeta {
    pub fn theme_id(&self) -> Option<ThemeId> {
        match self {
            TopicMeta::Themed { theme_id, .. } => Some(*theme_id),
            TopicMeta::Free => None,
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, TopicMeta::Free)
    }
}

/// The theme information the engine needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThemeSeed {
    pub theme_id: ThemeId,
    pub name: String,
    pub code_ids: Vec<CodeId>,
}

impl From<&Theme> for ThemeSeed {
    fn from(t: &Theme) -> Self {
        Self {
            theme_id: t.theme_id,
            name: t.name.clone(),
            code_ids: t.code_ids.clone(),
        }
    }
}

/// Topic-word distributions and their bindings to themes.
///
/// `mass[k]` is the total unnormalized pseudo-count behind row `k`, so
/// `beta[k][w] * mass[k]` recovers the smoothed expected count of word `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub words: Vec<String>,
    pub beta: Vec<Vec<f64>>,
    pub mass: Vec<f64>,
    pub alpha: f64,
    pub eta: f64,
    pub topic_meta: Vec<TopicMeta>,
    pub version: u64,
}

impl TopicModel {
    pub fn num_topics(&self) -> usize {
        self.beta.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn topic_of_theme(&self, theme_id: ThemeId) -> Option<usize> {
        self.topic_meta
            .iter()
            .position(|m| m.theme_id() == Some(theme_id))
    }

    pub fn themed_count(&self) -> usize {
        self.topic_meta.iter().filter(|m| !m.is_free()).count()
    }

    /// Display name: the theme name, or `free-<i>` for the i-th free topic.
    pub fn topic_name(&self, k: usize) -> String {
        match &self.topic_meta[k] {
            TopicMeta::Themed { name, .. } => name.clone(),
            TopicMeta::Free => {
                let i = self.topic_meta[..k].iter().filter(|m| m.is_free()).count();
                format!("free-{i}")
            }
        }
    }

    /// The `n` most probable words of topic `k`, ties broken by word.
    pub fn top_words(&self, k: usize, n: usize) -> Vec<(String, f64)> {
        let row = &self.beta[k];
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| {
            row[b]
                .total_cmp(&row[a])
                .then_with(|| self.words[a].cmp(&self.words[b]))
        });
        idx.into_iter()
            .take(n)
            .map(|w| (self.words[w].clone(), row[w]))
            .collect()
    }

    /// Total pseudo-count mass over all topics.
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

/// Variational state of one document.
///
/// `tokens` lists the indices (into `Document::tokens`) of the tokens that
/// carried a vocabulary word at training time; `phi` has one row per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocTopicState {
    pub tokens: Vec<usize>,
    pub gamma: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub theta_hat: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub degenerate: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

/// `gamma - alpha`, floored at zero and normalized. Falls back to uniform
/// when nothing is left.
pub fn theta_from_gamma(gamma: &[f64], alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = gamma.iter().map(|g| (g - alpha).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / gamma.len() as f64; gamma.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitTrace {
    /// Bound after each EM iteration.
    pub elbo: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Tokens whose responsibilities were fully forbidden and had to fall back.
    #[serde(default)]
    pub degenerate_tokens: usize,
}

/// Everything a training run publishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u64,
    pub config: TrainConfig,
    pub model: TopicModel,
    pub states: BTreeMap<String, DocTopicState>,
    pub trace: FitTrace,
}

impl Snapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}
