//! Keyword/attribute search and topic-driven document retrieval.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::annotation::ThemeId;
use crate::corpus::{Corpus, Document, GeoPoint, Span};
use crate::engine::{DocTopicState, Snapshot};
use crate::error::QueryError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl GeoBox {
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat) && (self.min_lon..=self.max_lon).contains(&p.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    /// Every term must occur in the document.
    pub terms: Vec<String>,
    pub thread_id: Option<String>,
    pub geo_box: Option<GeoBox>,
    pub limit: usize,
    pub offset: usize,
}

impl Default for SearchQuery {
    fn default() -> Self {
        Self {
            terms: Vec::new(),
            thread_id: None,
            geo_box: None,
            limit: 50,
            offset: 0,
        }
    }
}

impl SearchQuery {
    pub fn terms(terms: &[&str]) -> Self {
        Self {
            terms: terms.iter().map(|t| t.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        if self.limit == 0 {
            return Err(QueryError::Invalid("limit must be at least 1".into()));
        }
        if let Some(b) = self.geo_box {
            if !(b.min_lat <= b.max_lat && b.min_lon <= b.max_lon) {
                return Err(QueryError::Invalid("bounding box corners are out of order".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub total: usize,
    pub doc_ids: Vec<String>,
}

/// Word → documents postings plus per-document attributes.
#[derive(Debug, Clone, Default)]
pub struct CorpusIndex {
    postings: BTreeMap<String, BTreeSet<String>>,
    attrs: BTreeMap<String, (String, Option<GeoPoint>)>,
}

impl CorpusIndex {
    pub fn new(documents: &[Document]) -> Self {
        let mut idx = Self::default();
        for d in documents {
            for t in &d.tokens {
                idx.postings
                    .entry(t.surface.clone())
                    .or_default()
                    .insert(d.doc_id.clone());
            }
            idx.attrs
                .insert(d.doc_id.clone(), (d.thread_id.clone(), d.geo));
        }
        idx
    }

    /// Documents matching all terms and filters, ordered by id.
    pub fn search(&self, query: &SearchQuery) -> Result<Page, QueryError> {
        query.validate()?;
        let terms: Vec<String> = query
            .terms
            .iter()
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();

        let mut hits: Vec<&String> = match terms.split_first() {
            None => self.attrs.keys().collect(),
            Some((first, rest)) => {
                let Some(base) = self.postings.get(first) else {
                    return Ok(Page { total: 0, doc_ids: vec![] });
                };
                base.iter()
                    .filter(|d| {
                        rest.iter()
                            .all(|t| self.postings.get(t).is_some_and(|p| p.contains(*d)))
                    })
                    .collect()
            }
        };
        hits.retain(|d| {
            let (thread, geo) = &self.attrs[*d];
            query.thread_id.as_ref().is_none_or(|t| t == thread)
                && query
                    .geo_box
                    .is_none_or(|b| geo.is_some_and(|g| b.contains(g)))
        });
        Ok(Page {
            total: hits.len(),
            doc_ids: hits
                .into_iter()
                .skip(query.offset)
                .take(query.limit)
                .cloned()
                .collect(),
        })
    }
}

/// Free-function form of [`CorpusIndex::search`].
pub fn search(query: &SearchQuery, corpus: &Corpus) -> Result<Page, QueryError> {
    CorpusIndex::new(&corpus.documents).search(query)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
    pub snippet: String,
}

const SNIPPET_CONTEXT: usize = 40;

fn snippet(doc: &Document, state: &DocTopicState, topic: usize) -> String {
    let best = state
        .tokens
        .iter()
        .zip(&state.phi)
        .filter(|(_, row)| row[topic] > 0.0)
        .reduce(|a, b| if b.1[topic] > a.1[topic] { b } else { a });
    let Some((&tok, _)) = best else {
        return String::new();
    };
    let span = doc.tokens[tok].span;
    let start = span.start.saturating_sub(SNIPPET_CONTEXT);
    let end = (span.end + SNIPPET_CONTEXT).min(doc.char_len());
    doc.slice(Span::new(start, end))
}

/// Top-`n` documents by their share of topic `topic`; ties by id.
pub fn rank_topic(
    topic: usize,
    snapshot: Option<&Snapshot>,
    corpus: &Corpus,
    n: usize,
) -> Result<Vec<RankedDoc>, QueryError> {
    let snap = snapshot.ok_or(QueryError::StaleModel)?;
    if topic >= snap.model.num_topics() {
        return Err(QueryError::TopicOutOfRange(topic));
    }
    let mut ranked: Vec<(&String, &DocTopicState)> = snap.states.iter().collect();
    ranked.sort_by(|a, b| {
        b.1.theta_hat[topic]
            .total_cmp(&a.1.theta_hat[topic])
            .then_with(|| a.0.cmp(b.0))
    });
    Ok(ranked
        .into_iter()
        .take(n)
        .map(|(id, s)| RankedDoc {
            doc_id: id.clone(),
            score: s.theta_hat[topic],
            snippet: corpus.get(id).map(|d| snippet(d, s, topic)).unwrap_or_default(),
        })
        .collect())
}

/// Top-`n` documents for a theme's topic in the published snapshot.
pub fn rank_by_topic(
    theme_id: ThemeId,
    snapshot: Option<&Snapshot>,
    corpus: &Corpus,
    n: usize,
) -> Result<Vec<RankedDoc>, QueryError> {
    let snap = snapshot.ok_or(QueryError::StaleModel)?;
    let topic = snap
        .model
        .topic_of_theme(theme_id)
        .ok_or(QueryError::UnboundTheme(theme_id))?;
    rank_topic(topic, Some(snap), corpus, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordContribution {
    pub word: String,
    pub spans: Vec<Span>,
    /// Sum over the word's tokens of their responsibility toward the topic.
    pub weight: f64,
}

/// Words of `doc` ranked by how much of topic `topic` they carry.
pub fn explain_topic(
    doc: &Document,
    topic: usize,
    snapshot: Option<&Snapshot>,
) -> Result<Vec<WordContribution>, QueryError> {
    let snap = snapshot.ok_or(QueryError::StaleModel)?;
    if topic >= snap.model.num_topics() {
        return Err(QueryError::TopicOutOfRange(topic));
    }
    let state = snap
        .states
        .get(&doc.doc_id)
        .ok_or_else(|| QueryError::UnknownDocument(doc.doc_id.clone()))?;
    let mut by_word: BTreeMap<&str, (Vec<Span>, f64)> = BTreeMap::new();
    for (&tok, row) in state.tokens.iter().zip(&state.phi) {
        let t = &doc.tokens[tok];
        let e = by_word.entry(t.surface.as_str()).or_default();
        e.0.push(t.span);
        e.1 += row[topic];
    }
    let mut out: Vec<WordContribution> = by_word
        .into_iter()
        .filter(|(_, (_, w))| *w > 0.0)
        .map(|(word, (spans, weight))| WordContribution {
            word: word.to_owned(),
            spans,
            weight,
        })
        .collect();
    out.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.word.cmp(&b.word)));
    Ok(out)
}

/// [`explain_topic`] for the topic bound to `theme_id`.
pub fn explain_assignment(
    doc: &Document,
    theme_id: ThemeId,
    snapshot: Option<&Snapshot>,
) -> Result<Vec<WordContribution>, QueryError> {
    let snap = snapshot.ok_or(QueryError::StaleModel)?;
    let topic = snap
        .model
        .topic_of_theme(theme_id)
        .ok_or(QueryError::UnboundTheme(theme_id))?;
    explain_topic(doc, topic, Some(snap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSettings;
    use crate::engine::{FitTrace, TopicMeta, TopicModel, TrainConfig};

    fn corpus() -> Corpus {
        let mut d1 = Document::new("d1", "We went dating and he dumped me");
        d1.geo = Some(GeoPoint { lat: 51.5, lon: -0.1 });
        d1.thread_id = "t1".into();
        let mut d2 = Document::new("d2", "Dating is hard");
        d2.thread_id = "t2".into();
        let d3 = Document::new("d3", "nothing to see");
        Corpus::build(vec![d2, d3, d1], CorpusSettings::default()).unwrap()
    }

    #[test]
    fn search_examples() {
        let c = corpus();
        let idx = CorpusIndex::new(&c.documents);
        assert_eq!(idx.search(&SearchQuery::terms(&["dating"])).unwrap().doc_ids, ["d1", "d2"]);
        assert_eq!(
            idx.search(&SearchQuery::terms(&["dating", "dumped"])).unwrap().doc_ids,
            ["d1"]
        );
        assert_eq!(idx.search(&SearchQuery::terms(&["DATING "])).unwrap().total, 2);
        assert!(idx.search(&SearchQuery::terms(&["unicorn"])).unwrap().doc_ids.is_empty());

        let far = SearchQuery {
            geo_box: Some(GeoBox {
                min_lat: 0.0,
                min_lon: 0.0,
                max_lat: 1.0,
                max_lon: 1.0,
            }),
            ..SearchQuery::default()
        };
        assert!(idx.search(&far).unwrap().doc_ids.is_empty());
        let london = SearchQuery {
            geo_box: Some(GeoBox {
                min_lat: 51.0,
                min_lon: -1.0,
                max_lat: 52.0,
                max_lon: 0.0,
            }),
            ..SearchQuery::default()
        };
        assert_eq!(idx.search(&london).unwrap().doc_ids, ["d1"]);

        let thread = SearchQuery {
            thread_id: Some("t2".into()),
            ..SearchQuery::default()
        };
        assert_eq!(idx.search(&thread).unwrap().doc_ids, ["d2"]);
    }

    #[test]
    fn search_paginates_stably() {
        let c = corpus();
        let idx = CorpusIndex::new(&c.documents);
        let page = |offset| {
            idx.search(&SearchQuery {
                limit: 2,
                offset,
                ..SearchQuery::default()
            })
            .unwrap()
        };
        assert_eq!(page(0).doc_ids, ["d1", "d2"]);
        assert_eq!(page(2).doc_ids, ["d3"]);
        assert_eq!(page(2).total, 3);
        let bad = SearchQuery {
            limit: 0,
            ..SearchQuery::default()
        };
        assert!(idx.search(&bad).is_err());
    }

    fn snapshot(shares: &[(&str, f64)]) -> Snapshot {
        let states = shares
            .iter()
            .map(|(id, s)| {
                (
                    id.to_string(),
                    DocTopicState {
                        tokens: vec![],
                        gamma: vec![1.0, 1.0],
                        phi: vec![],
                        theta_hat: vec![*s, 1.0 - s],
                        degenerate: 0,
                    },
                )
            })
            .collect();
        Snapshot {
            version: 1,
            config: TrainConfig::default(),
            model: TopicModel {
                words: vec!["x".into()],
                beta: vec![vec![1.0], vec![1.0]],
                mass: vec![1.0, 1.0],
                alpha: 0.1,
                eta: 0.01,
                topic_meta: vec![
                    TopicMeta::Themed {
                        theme_id: 4,
                        name: "dating".into(),
                        code_ids: vec![0],
                        coded_words: vec![],
                    },
                    TopicMeta::Free,
                ],
                version: 1,
            },
            states,
            trace: FitTrace::default(),
        }
    }

    #[test]
    fn ranking_examples() {
        let c = corpus();
        let snap = snapshot(&[("d2", 0.3), ("d1", 0.8)]);
        let top = rank_by_topic(4, Some(&snap), &c, 1).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].doc_id, "d1");
        assert_eq!(top[0].score, 0.8);

        let tie = snapshot(&[("d2", 0.5), ("d1", 0.5)]);
        let ids: Vec<_> = rank_by_topic(4, Some(&tie), &c, 2)
            .unwrap()
            .into_iter()
            .map(|r| r.doc_id)
            .collect();
        assert_eq!(ids, ["d1", "d2"]);

        assert_eq!(rank_by_topic(4, Some(&snap), &c, 50).unwrap().len(), 2);
        assert_eq!(rank_by_topic(4, None, &c, 1), Err(QueryError::StaleModel));
        assert_eq!(rank_by_topic(9, Some(&snap), &c, 1), Err(QueryError::UnboundTheme(9)));
    }

    #[test]
    fn explanation_orders_words() {
        let c = corpus();
        let d1 = c.get("d1").unwrap();
        let mut snap = snapshot(&[("d1", 0.5)]);
        let dumped = d1.tokens.iter().position(|t| t.surface == "dumped").unwrap();
        let me = d1.tokens.iter().position(|t| t.surface == "me").unwrap();
        let st = snap.states.get_mut("d1").unwrap();
        st.tokens = vec![dumped, me];
        st.phi = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let ex = explain_assignment(d1, 4, Some(&snap)).unwrap();
        assert_eq!(ex[0].word, "dumped");
        assert_eq!(ex[1].word, "me");
        assert_eq!(ex[0].spans, vec![d1.tokens[dumped].span]);

        st_zero(&mut snap);
        assert!(explain_assignment(d1, 4, Some(&snap)).unwrap().is_empty());
        assert_eq!(explain_assignment(d1, 4, None), Err(QueryError::StaleModel));
    }

    fn st_zero(snap: &mut Snapshot) {
        let st = snap.states.get_mut("d1").unwrap();
        st.phi = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
    }
}
