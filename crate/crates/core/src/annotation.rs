//! Codes, themes and span annotations, and the constraints they impose on
//! the topic engine.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Span};
use crate::error::AnnotationError;

pub type CodeId = u64;
pub type ThemeId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Code {
    pub code_id: CodeId,
    pub label: String,
}

/// A named group of codes. `topic_id` is the index of the topic the theme
/// occupies in the next model: themes are laid out in `theme_id` order
/// ahead of the free topics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub theme_id: ThemeId,
    pub name: String,
    pub code_ids: Vec<CodeId>,
    pub topic_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Manual,
    Auto,
    Deleted,
}

/// A code attached to a document.
///
/// `span` is `None` for document-level automatic codes. Deleted records keep
/// the word types the automatic code had been applied to in `words`; those
/// are what the engine is kept away from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub doc_id: String,
    pub span: Option<Span>,
    pub code_id: CodeId,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub words: Vec<String>,
}

impl Annotation {
    fn manual(doc_id: &str, span: Span, code_id: CodeId) -> Self {
        Self {
            doc_id: doc_id.to_owned(),
            span: Some(span),
            code_id,
            origin: Origin::Manual,
            version: None,
            words: Vec::new(),
        }
    }

    pub fn auto(doc_id: &str, span: Option<Span>, code_id: CodeId, version: u64) -> Self {
        Self {
            doc_id: doc_id.to_owned(),
            span,
            code_id,
            origin: Origin::Auto,
            version: Some(version),
            words: Vec::new(),
        }
    }
}

/// Lowercases, trims and collapses internal whitespace.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// All codes, themes and annotations of a project.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotationStore {
    codes: Vec<Code>,
    themes: Vec<Theme>,
    annotations: Vec<Annotation>,
    #[serde(default)]
    next_code_id: CodeId,
    #[serde(default)]
    next_theme_id: ThemeId,
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn themes(&self) -> &[Theme] {
        &self.themes
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn code(&self, code_id: CodeId) -> Option<&Code> {
        self.codes.iter().find(|c| c.code_id == code_id)
    }

    pub fn code_by_label(&self, label: &str) -> Option<&Code> {
        let label = normalize_label(label);
        self.codes.iter().find(|c| c.label == label)
    }

    pub fn theme(&self, theme_id: ThemeId) -> Option<&Theme> {
        self.themes.iter().find(|t| t.theme_id == theme_id)
    }

    pub fn theme_of(&self, code_id: CodeId) -> Option<&Theme> {
        self.themes.iter().find(|t| t.code_ids.contains(&code_id))
    }

    pub fn annotations_for<'a>(&'a self, doc_id: &'a str) -> impl Iterator<Item = &'a Annotation> + 'a {
        self.annotations.iter().filter(move |a| a.doc_id == doc_id)
    }

    /// Records a manual code on `span`, creating the code (and its singleton
    /// theme) on first use of the label. A manual code clears any deletion
    /// record for the same document and code.
    pub fn apply_code(
        &mut self,
        doc: &Document,
        span: Span,
        label: &str,
    ) -> Result<Annotation, AnnotationError> {
        let len = doc.char_len();
        if span.is_empty() || span.end > len {
            return Err(AnnotationError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len,
            });
        }
        if !doc.tokens_in(span).any(|i| !doc.tokens[i].is_stopped()) {
            return Err(AnnotationError::EmptySelection);
        }
        let label = normalize_label(label);
        if label.is_empty() {
            return Err(AnnotationError::InvalidLabel);
        }

        let code_id = match self.codes.iter().find(|c| c.label == label) {
            Some(c) => c.code_id,
            None => self.create_code(label),
        };

        self.annotations.retain(|a| {
            !(a.origin == Origin::Deleted && a.doc_id == doc.doc_id && a.code_id == code_id)
        });

        let ann = Annotation::manual(&doc.doc_id, span, code_id);
        if !self.annotations.contains(&ann) {
            self.annotations.push(ann.clone());
        }
        Ok(ann)
    }

    fn create_code(&mut self, label: String) -> CodeId {
        let code_id = self.next_code_id;
        self.next_code_id += 1;
        self.codes.push(Code {
            code_id,
            label: label.clone(),
        });
        self.push_theme(label, vec![code_id]);
        code_id
    }

    fn push_theme(&mut self, name: String, code_ids: Vec<CodeId>) -> ThemeId {
        let theme_id = self.next_theme_id;
        self.next_theme_id += 1;
        self.themes.push(Theme {
            theme_id,
            name,
            code_ids,
            topic_id: 0,
        });
        self.reindex_topics();
        theme_id
    }

    fn reindex_topics(&mut self) {
        self.themes.sort_by_key(|t| t.theme_id);
        for (i, t) in self.themes.iter_mut().enumerate() {
            t.topic_id = i;
        }
    }

    /// Removes a manual annotation. Unlike deletion of an automatic code this
    /// leaves no record behind.
    pub fn retract_manual(
        &mut self,
        doc_id: &str,
        code_id: CodeId,
        span: Span,
    ) -> Result<Annotation, AnnotationError> {
        let pos = self
            .annotations
            .iter()
            .position(|a| {
                a.origin == Origin::Manual
                    && a.doc_id == doc_id
                    && a.code_id == code_id
                    && a.span == Some(span)
            })
            .ok_or_else(|| AnnotationError::NotFound {
                doc_id: doc_id.to_owned(),
                code_id,
            })?;
        Ok(self.annotations.remove(pos))
    }

    /// Turns the automatic annotations of `code_id` on `doc` into a single
    /// deletion record. Calling it again returns the existing record.
    pub fn delete_auto_code(
        &mut self,
        doc: &Document,
        code_id: CodeId,
    ) -> Result<Annotation, AnnotationError> {
        let is_target = |a: &Annotation| a.doc_id == doc.doc_id && a.code_id == code_id;
        let autos: Vec<Annotation> = self
            .annotations
            .iter()
            .filter(|a| a.origin == Origin::Auto && is_target(a))
            .cloned()
            .collect();
        let existing = self
            .annotations
            .iter()
            .position(|a| a.origin == Origin::Deleted && is_target(a));

        if autos.is_empty() {
            return match existing {
                Some(i) => Ok(self.annotations[i].clone()),
                None => Err(AnnotationError::NotFound {
                    doc_id: doc.doc_id.clone(),
                    code_id,
                }),
            };
        }

        let token_spans: Vec<Span> = autos.iter().filter_map(|a| a.span).collect();
        let mut words: BTreeSet<String> = token_spans
            .iter()
            .flat_map(|s| doc.tokens_in(*s))
            .filter(|&i| !doc.tokens[i].is_stopped())
            .map(|i| doc.tokens[i].surface.clone())
            .collect();
        if words.is_empty() {
            // document-level code only: the theme is rejected for the whole text
            words = doc
                .tokens
                .iter()
                .filter(|t| !t.is_stopped())
                .map(|t| t.surface.clone())
                .collect();
        }
        let hull = token_spans.iter().copied().reduce(|a, b| {
            Span::new(a.start.min(b.start), a.end.max(b.end))
        });

        self.annotations
            .retain(|a| !(a.origin == Origin::Auto && is_target(a)));
        let record = match existing.and_then(|_| {
            self.annotations
                .iter_mut()
                .find(|a| a.origin == Origin::Deleted && is_target(a))
        }) {
            Some(rec) => {
                let mut merged: BTreeSet<String> = rec.words.drain(..).collect();
                merged.extend(words);
                rec.words = merged.into_iter().collect();
                rec.clone()
            }
            None => {
                let rec = Annotation {
                    doc_id: doc.doc_id.clone(),
                    span: hull,
                    code_id,
                    origin: Origin::Deleted,
                    version: None,
                    words: words.into_iter().collect(),
                };
                self.annotations.push(rec.clone());
                rec
            }
        };
        Ok(record)
    }

    /// Moves `code_id` into `target_theme_id`. A theme left without codes is
    /// retired; its topic is folded into the target's at the next training run.
    pub fn merge_codes(
        &mut self,
        target_theme_id: ThemeId,
        code_id: CodeId,
    ) -> Result<Theme, AnnotationError> {
        let source = self
            .theme_of(code_id)
            .ok_or(AnnotationError::UnknownCode(code_id))?
            .theme_id;
        if self.theme(target_theme_id).is_none() {
            return Err(AnnotationError::UnknownTheme(target_theme_id));
        }
        if source == target_theme_id {
            return Err(AnnotationError::SelfMerge {
                theme_id: target_theme_id,
                code_id,
            });
        }
        for t in &mut self.themes {
            if t.theme_id == source {
                t.code_ids.retain(|&c| c != code_id);
            } else if t.theme_id == target_theme_id {
                t.code_ids.push(code_id);
            }
        }
        self.themes.retain(|t| !t.code_ids.is_empty());
        self.reindex_topics();
        Ok(self.theme(target_theme_id).cloned().expect("target theme"))
    }

    /// Moves `code_id` out of `theme_id` into a new singleton theme named
    /// after the code. Returns `(remaining, new)`.
    pub fn split_code(
        &mut self,
        theme_id: ThemeId,
        code_id: CodeId,
    ) -> Result<(Theme, Theme), AnnotationError> {
        let theme = self
            .theme(theme_id)
            .ok_or(AnnotationError::UnknownTheme(theme_id))?;
        if !theme.code_ids.contains(&code_id) {
            return Err(AnnotationError::NotInTheme { theme_id, code_id });
        }
        if theme.code_ids.len() < 2 {
            return Err(AnnotationError::LastCode(theme_id));
        }
        let label = self
            .code(code_id)
            .ok_or(AnnotationError::UnknownCode(code_id))?
            .label
            .clone();
        for t in &mut self.themes {
            if t.theme_id == theme_id {
                t.code_ids.retain(|&c| c != code_id);
            }
        }
        let new_id = self.push_theme(label, vec![code_id]);
        Ok((
            self.theme(theme_id).cloned().expect("remaining theme"),
            self.theme(new_id).cloned().expect("new theme"),
        ))
    }

    pub fn rename_theme(&mut self, theme_id: ThemeId, name: &str) -> Result<Theme, AnnotationError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(AnnotationError::InvalidLabel);
        }
        let theme = self
            .themes
            .iter_mut()
            .find(|t| t.theme_id == theme_id)
            .ok_or(AnnotationError::UnknownTheme(theme_id))?;
        theme.name = name.to_owned();
        Ok(theme.clone())
    }

    /// Replaces every automatic annotation with `fresh`.
    pub fn replace_auto(&mut self, fresh: Vec<Annotation>) {
        self.annotations.retain(|a| a.origin != Origin::Auto);
        self.annotations
            .extend(fresh.into_iter().filter(|a| a.origin == Origin::Auto));
    }

    /// Themes that carry a deletion record on `doc_id`.
    pub fn deleted_themes(&self, doc_id: &str) -> BTreeSet<ThemeId> {
        self.annotations_for(doc_id)
            .filter(|a| a.origin == Origin::Deleted)
            .filter_map(|a| self.theme_of(a.code_id))
            .map(|t| t.theme_id)
            .collect()
    }

    /// Spans of every occurrence in `doc` of the word types the code has been
    /// attached to there, manually or automatically, ordered by start.
    pub fn code_occurrences(&self, doc: &Document, code_id: CodeId) -> Result<Vec<Span>, AnnotationError> {
        if self.code(code_id).is_none() {
            return Err(AnnotationError::UnknownCode(code_id));
        }
        let words: BTreeSet<&str> = self
            .annotations_for(&doc.doc_id)
            .filter(|a| a.code_id == code_id && a.origin != Origin::Deleted)
            .filter_map(|a| a.span)
            .flat_map(|s| doc.tokens_in(s))
            .filter(|&i| !doc.tokens[i].is_stopped())
            .map(|i| doc.tokens[i].surface.as_str())
            .collect();
        let mut spans: Vec<Span> = doc
            .tokens
            .iter()
            .filter(|t| words.contains(t.surface.as_str()))
            .map(|t| t.span)
            .collect();
        spans.sort();
        Ok(spans)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation store serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, AnnotationError> {
        let mut store: Self =
            serde_json::from_str(json).map_err(|e| AnnotationError::Format(e.to_string()))?;
        store.validate()?;
        let max_code = store.codes.iter().map(|c| c.code_id + 1).max().unwrap_or(0);
        let max_theme = store.themes.iter().map(|t| t.theme_id + 1).max().unwrap_or(0);
        store.next_code_id = store.next_code_id.max(max_code);
        store.next_theme_id = store.next_theme_id.max(max_theme);
        store.reindex_topics();
        Ok(store)
    }

    fn validate(&self) -> Result<(), AnnotationError> {
        let mut owner = BTreeMap::new();
        for t in &self.themes {
            if t.code_ids.is_empty() {
                return Err(AnnotationError::Format(format!("theme {} has no codes", t.theme_id)));
            }
            for &c in &t.code_ids {
                if owner.insert(c, t.theme_id).is_some() {
                    return Err(AnnotationError::Format(format!("code {c} is in two themes")));
                }
            }
        }
        for c in &self.codes {
            if !owner.contains_key(&c.code_id) {
                return Err(AnnotationError::Format(format!("code {} has no theme", c.code_id)));
            }
        }
        if owner.len() != self.codes.len() {
            return Err(AnnotationError::Format("theme references unknown code".into()));
        }
        Ok(())
    }
}

/// Word-level constraints for one document, keyed by vocabulary id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DocConstraints {
    pub clamp: BTreeMap<usize, BTreeSet<ThemeId>>,
    pub forbid: BTreeMap<usize, BTreeSet<ThemeId>>,
}

impl DocConstraints {
    fn is_empty(&self) -> bool {
        self.clamp.is_empty() && self.forbid.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub docs: BTreeMap<String, DocConstraints>,
}

impl ConstraintSet {
    pub fn get(&self, doc_id: &str) -> Option<&DocConstraints> {
        self.docs.get(doc_id)
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Words clamped to `theme` anywhere in the corpus.
    pub fn coded_words(&self, theme: ThemeId) -> BTreeSet<usize> {
        self.docs
            .values()
            .flat_map(|d| d.clamp.iter())
            .filter(|(_, ts)| ts.contains(&theme))
            .map(|(&w, _)| w)
            .collect()
    }

    /// `(word, theme)` pairs forbidden in at least one document.
    pub fn forbidden_pairs(&self) -> BTreeSet<(usize, ThemeId)> {
        pairs(self.docs.values().flat_map(|d| d.forbid.iter()))
    }

    /// `(word, theme)` pairs clamped in at least one document.
    pub fn clamped_pairs(&self) -> BTreeSet<(usize, ThemeId)> {
        pairs(self.docs.values().flat_map(|d| d.clamp.iter()))
    }
}

fn pairs<'a>(
    entries: impl Iterator<Item = (&'a usize, &'a BTreeSet<ThemeId>)>,
) -> BTreeSet<(usize, ThemeId)> {
    entries
        .flat_map(|(&w, ts)| ts.iter().map(move |&t| (w, t)))
        .collect()
}

/// Turns annotations into engine constraints.
///
/// Manual codes clamp every word type under their span, for the whole
/// document. Deletion records forbid the recorded word types for the code's
/// theme in that document. Clamps take precedence over forbids.
pub fn derive_constraints(store: &AnnotationStore, documents: &[Document]) -> ConstraintSet {
    let by_id: BTreeMap<&str, &Document> =
        documents.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut set = ConstraintSet::default();

    for ann in store.annotations() {
        let (Some(doc), Some(theme)) = (by_id.get(ann.doc_id.as_str()), store.theme_of(ann.code_id))
        else {
            continue;
        };
        match ann.origin {
            Origin::Manual => {
                let Some(span) = ann.span else { continue };
                let entry = set.docs.entry(ann.doc_id.clone()).or_default();
                for i in doc.tokens_in(span) {
                    if let Some(w) = doc.tokens[i].word_id {
                        entry.clamp.entry(w).or_default().insert(theme.theme_id);
                    }
                }
            }
            Origin::Deleted => {
                let words: BTreeSet<&str> = ann.words.iter().map(String::as_str).collect();
                let entry = set.docs.entry(ann.doc_id.clone()).or_default();
                for tok in &doc.tokens {
                    if let Some(w) = tok.word_id.filter(|_| words.contains(tok.surface.as_str())) {
                        entry.forbid.entry(w).or_default().insert(theme.theme_id);
                    }
                }
            }
            Origin::Auto => {}
        }
    }

    for dc in set.docs.values_mut() {
        for (w, forbidden) in dc.forbid.iter_mut() {
            if let Some(clamped) = dc.clamp.get(w) {
                forbidden.retain(|t| !clamped.contains(t));
            }
        }
        dc.forbid.retain(|_, ts| !ts.is_empty());
    }
    set.docs.retain(|_, d| !d.is_empty());
    set
}
