use std::collections::BTreeSet;

use super::model::{DocTopicState, TopicMeta, TopicModel, TrainConfig};
use crate::annotation::{Annotation, AnnotationStore, Origin, ThemeId};
use crate::corpus::Document;

/// Automatic codes for one document from its current state.
///
/// A token gets its most responsible topic's theme when that topic is themed
/// and holds at least `tau_token` of the token (ties go to the lower topic
/// index). The document gets a span-less code for every themed topic whose
/// share reaches `tau_doc`. Tokens already coded by hand with the theme are
/// skipped, and themes deleted on this document are never suggested.
///
/// Suggestions carry the first code of their theme.
pub fn suggest_annotations(
    doc: &Document,
    state: &DocTopicState,
    model: &TopicModel,
    config: &TrainConfig,
    store: &AnnotationStore,
) -> Vec<Annotation> {
    let deleted = store.deleted_themes(&doc.doc_id);
    let code_for = |k: usize| -> Option<(ThemeId, u64)> {
        let TopicMeta::Themed { theme_id, .. } = &model.topic_meta[k] else {
            return None;
        };
        if deleted.contains(theme_id) {
            return None;
        }
        let theme = store.theme(*theme_id)?;
        theme.code_ids.first().map(|&c| (*theme_id, c))
    };

    let manual: Vec<(ThemeId, BTreeSet<usize>)> = store
        .annotations_for(&doc.doc_id)
        .filter(|a| a.origin == Origin::Manual)
        .filter_map(|a| {
            let theme = store.theme_of(a.code_id)?;
            let span = a.span?;
            Some((theme.theme_id, doc.tokens_in(span).collect()))
        })
        .collect();
    let hand_coded = |theme: ThemeId, token: usize| {
        manual
            .iter()
            .any(|(t, toks)| *t == theme && toks.contains(&token))
    };

    let mut out = Vec::new();
    for (&token, row) in state.tokens.iter().zip(&state.phi) {
        let Some((best, &p)) = row
            .iter()
            .enumerate()
            .reduce(|a, b| if b.1 > a.1 { b } else { a })
        else {
            continue;
        };
        if p < config.tau_token {
            continue;
        }
        let Some((theme, code)) = code_for(best) else { continue };
        if hand_coded(theme, token) {
            continue;
        }
        let span = doc.tokens[token].span;
        out.push(Annotation::auto(&doc.doc_id, Some(span), code, model.version));
    }

    for (k, &share) in state.theta_hat.iter().enumerate() {
        if share < config.tau_doc {
            continue;
        }
        if let Some((_, code)) = code_for(k) {
            out.push(Annotation::auto(&doc.doc_id, None, code, model.version));
        }
    }
    out
}
