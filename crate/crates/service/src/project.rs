//! A project's data and every operation on it, independent of transport.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use themetopic_core::corpus::GeoPoint;
use themetopic_core::engine::{fit_with, suggest_annotations, FitObserver, FitOutput};
use themetopic_core::query::{
    explain_assignment, rank_topic, CorpusIndex, RankedDoc, SearchQuery, WordContribution,
};
use themetopic_core::{
    derive_constraints, Annotation, AnnotationStore, CodeId, Corpus, CorpusSettings, Document,
    Origin, QueryError, Snapshot, Span, Theme, ThemeId, ThemeSeed, TrainConfig,
};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone)]
pub struct ProjectData {
    pub project_id: String,
    pub name: String,
    pub settings: CorpusSettings,
    /// Defaults for training runs; a run may override any field.
    pub config: TrainConfig,
    /// `None` until the first import. Shared so that clones stay cheap.
    pub corpus: Option<Arc<Corpus>>,
    pub annotations: AnnotationStore,
    pub snapshot: Option<Arc<Snapshot>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub imported: usize,
    pub documents: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationView {
    pub code_id: CodeId,
    pub label: String,
    pub theme_id: Option<ThemeId>,
    pub theme_name: Option<String>,
    pub origin: Origin,
    /// `None` for document-level automatic codes.
    pub span: Option<Span>,
    pub version: Option<u64>,
    /// Every span to light up when the code is selected.
    pub highlights: Vec<Span>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicShare {
    pub topic: usize,
    pub name: String,
    pub theme_id: Option<ThemeId>,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentView {
    pub doc_id: String,
    pub thread_id: String,
    pub author: Option<String>,
    pub timestamp: Option<String>,
    pub geo: Option<GeoPoint>,
    pub text: String,
    /// Version of the snapshot the automatic codes and shares come from.
    pub snapshot_version: Option<u64>,
    /// Manual, then automatic, then deleted; each group by span start.
    pub annotations: Vec<AnnotationView>,
    pub topics: Vec<TopicShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeView {
    pub theme_id: ThemeId,
    pub name: String,
    pub codes: Vec<themetopic_core::Code>,
    /// Index of the theme's topic in the published snapshot, if it has one.
    pub topic: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordProb {
    pub word: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicView {
    pub topic: usize,
    pub name: String,
    pub theme_id: Option<ThemeId>,
    pub version: u64,
    pub words: Vec<WordProb>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocHit {
    pub doc_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocPage {
    pub total: usize,
    pub items: Vec<DocHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub project_id: String,
    pub name: String,
    pub documents: usize,
    pub vocab_size: usize,
    pub codes: usize,
    pub themes: usize,
    pub snapshot_version: Option<u64>,
    pub config: TrainConfig,
}

/// Applies a JSON object of overrides to `base`. Unknown keys are rejected.
pub fn apply_overrides(base: &TrainConfig, overrides: &Value) -> Result<TrainConfig> {
    let mut merged = serde_json::to_value(base).expect("config serializes");
    match overrides {
        Value::Null => {}
        Value::Object(map) => {
            let target = merged.as_object_mut().expect("config is an object");
            for (k, v) in map {
                if !target.contains_key(k) {
                    return Err(ServiceError::Validation(format!("unknown training option {k:?}")));
                }
                target.insert(k.clone(), v.clone());
            }
        }
        _ => return Err(ServiceError::Validation("training options must be a JSON object".into())),
    }
    let cfg: TrainConfig =
        serde_json::from_value(merged).map_err(|e| ServiceError::Validation(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ProjectData {
    pub fn new(project_id: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            project_id: project_id.into(),
            name: name.into(),
            settings: CorpusSettings::default(),
            config: TrainConfig::default(),
            corpus: None,
            annotations: AnnotationStore::new(),
            snapshot: None,
        }
    }

    pub fn documents(&self) -> &[Document] {
        self.corpus.as_ref().map_or(&[], |c| c.documents.as_slice())
    }

    pub fn summary(&self) -> ProjectSummary {
        ProjectSummary {
            project_id: self.project_id.clone(),
            name: self.name.clone(),
            documents: self.documents().len(),
            vocab_size: self.corpus.as_ref().map_or(0, |c| c.vocab.len()),
            codes: self.annotations.codes().len(),
            themes: self.annotations.themes().len(),
            snapshot_version: self.snapshot.as_ref().map(|s| s.version),
            config: self.config.clone(),
        }
    }

    pub fn document(&self, doc_id: &str) -> Result<&Document> {
        self.corpus
            .as_ref()
            .and_then(|c| c.get(doc_id))
            .ok_or_else(|| ServiceError::NotFound(format!("document {doc_id}")))
    }

    pub fn snapshot(&self) -> Result<&Arc<Snapshot>> {
        self.snapshot.as_ref().ok_or(ServiceError::Query(QueryError::StaleModel))
    }

    pub fn import(&mut self, docs: Vec<Document>) -> Result<ImportSummary> {
        let imported = docs.len();
        match &mut self.corpus {
            Some(c) => Arc::make_mut(c).extend(docs)?,
            None => self.corpus = Some(Arc::new(Corpus::build(docs, self.settings.clone())?)),
        }
        let c = self.corpus.as_ref().expect("corpus present after import");
        Ok(ImportSummary {
            imported,
            documents: c.len(),
            vocab_size: c.vocab.len(),
        })
    }

    fn document_and_store(&mut self, doc_id: &str) -> Result<(&Document, &mut AnnotationStore)> {
        let doc = self
            .corpus
            .as_ref()
            .and_then(|c| c.get(doc_id))
            .ok_or_else(|| ServiceError::NotFound(format!("document {doc_id}")))?;
        Ok((doc, &mut self.annotations))
    }

    pub fn apply_code(&mut self, doc_id: &str, span: Span, label: &str) -> Result<Annotation> {
        let (doc, store) = self.document_and_store(doc_id)?;
        Ok(store.apply_code(doc, span, label)?)
    }

    pub fn delete_auto_code(&mut self, doc_id: &str, code_id: CodeId) -> Result<Annotation> {
        let (doc, store) = self.document_and_store(doc_id)?;
        Ok(store.delete_auto_code(doc, code_id)?)
    }

    pub fn retract_manual(&mut self, doc_id: &str, code_id: CodeId, span: Span) -> Result<Annotation> {
        let (_, store) = self.document_and_store(doc_id)?;
        Ok(store.retract_manual(doc_id, code_id, span)?)
    }

    pub fn theme_views(&self) -> Vec<ThemeView> {
        self.annotations
            .themes()
            .iter()
            .map(|t| self.theme_view(t))
            .collect()
    }

    pub fn theme_view(&self, t: &Theme) -> ThemeView {
        ThemeView {
            theme_id: t.theme_id,
            name: t.name.clone(),
            codes: t
                .code_ids
                .iter()
                .filter_map(|&c| self.annotations.code(c).cloned())
                .collect(),
            topic: self
                .snapshot
                .as_ref()
                .and_then(|s| s.model.topic_of_theme(t.theme_id)),
        }
    }

    /// Everything needed to train: themes, constraints and the previous snapshot.
    pub fn train(&self, config: &TrainConfig, observer: &mut dyn FitObserver) -> Result<FitOutput> {
        let corpus = self
            .corpus
            .as_ref()
            .ok_or_else(|| ServiceError::Validation("project has no documents".into()))?;
        let themes: Vec<ThemeSeed> = self.annotations.themes().iter().map(ThemeSeed::from).collect();
        let constraints = derive_constraints(&self.annotations, &corpus.documents);
        Ok(fit_with(
            corpus,
            &themes,
            &constraints,
            config,
            self.snapshot.as_deref(),
            observer,
        )?)
    }

    /// Makes `out` the current snapshot and regenerates all automatic codes from it.
    pub fn publish(&mut self, out: FitOutput, config: &TrainConfig) -> Arc<Snapshot> {
        let snapshot = Arc::new(out.into_snapshot(config));
        let mut fresh = Vec::new();
        for doc in self.documents() {
            if let Some(state) = snapshot.states.get(&doc.doc_id) {
                fresh.extend(suggest_annotations(
                    doc,
                    state,
                    &snapshot.model,
                    config,
                    &self.annotations,
                ));
            }
        }
        self.annotations.replace_auto(fresh);
        self.snapshot = Some(Arc::clone(&snapshot));
        snapshot
    }

    pub fn document_view(&self, doc_id: &str) -> Result<DocumentView> {
        let doc = self.document(doc_id)?;
        let store = &self.annotations;
        let mut anns: Vec<&Annotation> = store.annotations_for(doc_id).collect();
        anns.sort_by_key(|a| (a.origin, a.span.map(|s| (s.start, s.end)), a.code_id));
        let annotations = anns
            .into_iter()
            .map(|a| {
                let theme = store.theme_of(a.code_id);
                let highlights = match a.origin {
                    Origin::Deleted => doc
                        .tokens
                        .iter()
                        .filter(|t| a.words.contains(&t.surface))
                        .map(|t| t.span)
                        .collect(),
                    _ => store.code_occurrences(doc, a.code_id).unwrap_or_default(),
                };
                AnnotationView {
                    code_id: a.code_id,
                    label: store.code(a.code_id).map(|c| c.label.clone()).unwrap_or_default(),
                    theme_id: theme.map(|t| t.theme_id),
                    theme_name: theme.map(|t| t.name.clone()),
                    origin: a.origin,
                    span: a.span,
                    version: a.version,
                    highlights,
                    words: a.words.clone(),
                }
            })
            .collect();
        let topics = self
            .snapshot
            .as_ref()
            .and_then(|s| s.states.get(doc_id).map(|st| (s, st)))
            .map(|(s, st)| {
                st.theta_hat
                    .iter()
                    .enumerate()
                    .map(|(k, &share)| TopicShare {
                        topic: k,
                        name: s.model.topic_name(k),
                        theme_id: s.model.topic_meta[k].theme_id(),
                        share,
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(DocumentView {
            doc_id: doc.doc_id.clone(),
            thread_id: doc.thread_id.clone(),
            author: doc.author.clone(),
            timestamp: doc.timestamp.clone(),
            geo: doc.geo,
            text: doc.text.clone(),
            snapshot_version: self.snapshot.as_ref().map(|s| s.version),
            annotations,
            topics,
        })
    }

    /// Keyword/attribute search, optionally re-ordered by a topic's share.
    pub fn search(&self, query: &SearchQuery, topic: Option<usize>) -> Result<DocPage> {
        let Some(corpus) = &self.corpus else {
            query.validate()?;
            return Ok(DocPage { total: 0, items: vec![] });
        };
        let index = CorpusIndex::new(&corpus.documents);
        let Some(k) = topic else {
            let page = index.search(query)?;
            return Ok(DocPage {
                total: page.total,
                items: page
                    .doc_ids
                    .into_iter()
                    .map(|doc_id| DocHit { doc_id, score: None })
                    .collect(),
            });
        };
        let snap = self.snapshot()?;
        if k >= snap.model.num_topics() {
            return Err(QueryError::TopicOutOfRange(k).into());
        }
        let all = index.search(&SearchQuery {
            limit: usize::MAX,
            offset: 0,
            ..query.clone()
        })?;
        let mut scored: Vec<DocHit> = all
            .doc_ids
            .into_iter()
            .map(|doc_id| {
                let score = snap.states.get(&doc_id).map_or(0.0, |s| s.theta_hat[k]);
                DocHit {
                    doc_id,
                    score: Some(score),
                }
            })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .unwrap_or(0.0)
                .total_cmp(&a.score.unwrap_or(0.0))
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        Ok(DocPage {
            total: all.total,
            items: scored.into_iter().skip(query.offset).take(query.limit).collect(),
        })
    }

    pub fn topic_view(&self, k: usize, n: usize) -> Result<TopicView> {
        let snap = self.snapshot()?;
        if k >= snap.model.num_topics() {
            return Err(QueryError::TopicOutOfRange(k).into());
        }
        Ok(TopicView {
            topic: k,
            name: snap.model.topic_name(k),
            theme_id: snap.model.topic_meta[k].theme_id(),
            version: snap.version,
            words: snap
                .model
                .top_words(k, n)
                .into_iter()
                .map(|(word, prob)| WordProb { word, prob })
                .collect(),
        })
    }

    pub fn topics(&self, n: usize) -> Result<Vec<TopicView>> {
        let snap = self.snapshot()?;
        (0..snap.model.num_topics()).map(|k| self.topic_view(k, n)).collect()
    }

    pub fn topic_documents(&self, k: usize, n: usize) -> Result<Vec<RankedDoc>> {
        let corpus = self
            .corpus
            .as_ref()
            .ok_or(ServiceError::Query(QueryError::StaleModel))?;
        Ok(rank_topic(k, self.snapshot.as_deref(), corpus, n)?)
    }

    pub fn explain(&self, doc_id: &str, theme_id: ThemeId) -> Result<Vec<WordContribution>> {
        let doc = self.document(doc_id)?;
        Ok(explain_assignment(doc, theme_id, self.snapshot.as_deref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_merge_and_validate() {
        let base = TrainConfig::default();
        let cfg = apply_overrides(&base, &json!({"k_free": 2, "rng_seed": 7})).unwrap();
        assert_eq!(cfg.k_free, 2);
        assert_eq!(cfg.rng_seed, 7);
        assert_eq!(cfg.alpha, base.alpha);
        assert!(apply_overrides(&base, &json!({"kfree": 2})).is_err());
        assert!(apply_overrides(&base, &json!({"alpha": -1.0})).is_err());
        assert!(apply_overrides(&base, &json!([1])).is_err());
        assert_eq!(apply_overrides(&base, &Value::Null).unwrap(), base);
    }
}
