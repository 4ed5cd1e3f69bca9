//! Variational E-step, smoothed M-step and the bound they climb.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use statrs::function::gamma::{digamma, ln_gamma};

use super::model::{theta_from_gamma, DocTopicState, TopicMeta, TopicModel, TrainConfig};
use crate::annotation::{ConstraintSet, DocConstraints};
use crate::corpus::Document;
use crate::error::EngineError;

/// How a word's responsibilities are obtained inside one document.
#[derive(Debug, Clone)]
pub(crate) enum Row {
    /// Computed from the model, restricted to `allowed` topics when some are
    /// forbidden. `fallback` is used when no allowed topic has probability.
    Open {
        allowed: Option<Vec<bool>>,
        fallback: Vec<f64>,
    },
    /// Fixed by manual codes.
    Clamped(Vec<f64>),
}

/// A document reduced to unique words with counts, plus per-word constraints.
#[derive(Debug, Clone)]
pub(crate) struct DocWork {
    pub doc_id: String,
    /// Indices into `Document::tokens` of live tokens.
    pub token_idx: Vec<usize>,
    /// For each live token, the index of its word in `words`.
    pub token_word: Vec<usize>,
    pub words: Vec<usize>,
    pub counts: Vec<f64>,
    pub rows: Vec<Row>,
    pub n_tokens: f64,
}

pub(crate) fn theme_topics(meta: &[TopicMeta]) -> HashMap<u64, usize> {
    meta.iter()
        .enumerate()
        .filter_map(|(k, m)| m.theme_id().map(|t| (t, k)))
        .collect()
}

pub(crate) fn prepare(
    doc: &Document,
    meta: &[TopicMeta],
    vocab_size: usize,
    constraints: Option<&DocConstraints>,
) -> Result<DocWork, EngineError> {
    let k = meta.len();
    let topic_of = theme_topics(meta);
    let free: Vec<usize> = (0..k).filter(|&t| meta[t].is_free()).collect();

    let mut token_idx = Vec::new();
    let mut live_words = Vec::new();
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, tok) in doc.tokens.iter().enumerate() {
        let Some(w) = tok.word_id else { continue };
        if w >= vocab_size {
            return Err(EngineError::InvalidConfig(format!(
                "document {:?} references word {w} outside the model vocabulary",
                doc.doc_id
            )));
        }
        token_idx.push(i);
        live_words.push(w);
        *counts.entry(w).or_default() += 1.0;
    }
    let words: Vec<usize> = counts.keys().copied().collect();
    let position: HashMap<usize, usize> = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
    let token_word = live_words.iter().map(|w| position[w]).collect();

    let rows = words
        .iter()
        .map(|w| {
            let clamp: BTreeSet<usize> = constraints
                .and_then(|c| c.clamp.get(w))
                .map(|ts| ts.iter().filter_map(|t| topic_of.get(t).copied()).collect())
                .unwrap_or_default();
            if !clamp.is_empty() {
                return Row::Clamped(even_row(k, &clamp));
            }
            let forbidden: BTreeSet<usize> = constraints
                .and_then(|c| c.forbid.get(w))
                .map(|ts| ts.iter().filter_map(|t| topic_of.get(t).copied()).collect())
                .unwrap_or_default();
            let allowed = (!forbidden.is_empty())
                .then(|| (0..k).map(|t| !forbidden.contains(&t)).collect::<Vec<bool>>());
            let fallback = fallback_row(k, &free, &forbidden);
            Row::Open { allowed, fallback }
        })
        .collect();

    Ok(DocWork {
        doc_id: doc.doc_id.clone(),
        n_tokens: token_idx.len() as f64,
        token_idx,
        token_word,
        counts: counts.values().copied().collect(),
        words,
        rows,
    })
}

fn even_row(k: usize, support: &BTreeSet<usize>) -> Vec<f64> {
    let share = 1.0 / support.len() as f64;
    (0..k)
        .map(|t| if support.contains(&t) { share } else { 0.0 })
        .collect()
}

fn fallback_row(k: usize, free: &[usize], forbidden: &BTreeSet<usize>) -> Vec<f64> {
    let mut support: BTreeSet<usize> = free.iter().copied().collect();
    if support.is_empty() {
        support = (0..k).filter(|t| !forbidden.contains(t)).collect();
    }
    if support.is_empty() {
        support = (0..k).collect();
    }
    even_row(k, &support)
}

/// Result of the inner loop for one document, per unique word.
#[derive(Debug, Clone)]
pub(crate) struct DocFit {
    pub gamma: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub degenerate: usize,
}

pub(crate) fn cold_gamma(k: usize, alpha: f64, n_tokens: f64) -> Vec<f64> {
    vec![alpha + n_tokens / k as f64; k]
}

/// Coordinate ascent on one document: responsibilities given gamma, then
/// gamma given responsibilities, until gamma settles.
pub(crate) fn infer(
    work: &DocWork,
    beta: &[Vec<f64>],
    alpha: f64,
    config: &TrainConfig,
    gamma: Vec<f64>,
) -> DocFit {
    let k = beta.len();
    let mut gamma = gamma;
    let mut phi: Vec<Vec<f64>> = work
        .rows
        .iter()
        .map(|r| match r {
            Row::Clamped(row) => row.clone(),
            Row::Open { .. } => vec![0.0; k],
        })
        .collect();
    let mut degenerate = 0;
    let mut weight = vec![0.0; k];

    for _ in 0..config.doc_inner_iters {
        let psi: Vec<f64> = gamma.iter().map(|&g| digamma(g)).collect();
        let top = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (wk, p) in weight.iter_mut().zip(&psi) {
            *wk = (p - top).exp();
        }

        degenerate = 0;
        for (u, row) in work.rows.iter().enumerate() {
            let Row::Open { allowed, fallback } = row else { continue };
            let w = work.words[u];
            let out = &mut phi[u];
            let mut total = 0.0;
            for t in 0..k {
                let open = allowed.as_ref().is_none_or(|a| a[t]);
                out[t] = if open { beta[t][w] * weight[t] } else { 0.0 };
                total += out[t];
            }
            if total > 0.0 && total.is_finite() {
                for v in out.iter_mut() {
                    *v /= total;
                }
            } else {
                out.copy_from_slice(fallback);
                degenerate += work.counts[u] as usize;
            }
        }

        let mut next = vec![alpha; k];
        for (row, &c) in phi.iter().zip(&work.counts) {
            for (g, p) in next.iter_mut().zip(row) {
                *g += c * p;
            }
        }
        let delta = next
            .iter()
            .zip(&gamma)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / k as f64;
        gamma = next;
        if delta < config.doc_conv_tol {
            break;
        }
    }

    DocFit {
        gamma,
        phi,
        degenerate,
    }
}

pub(crate) fn expand(work: &DocWork, fit: &DocFit, alpha: f64) -> DocTopicState {
    DocTopicState {
        tokens: work.token_idx.clone(),
        phi: work.token_word.iter().map(|&u| fit.phi[u].clone()).collect(),
        theta_hat: theta_from_gamma(&fit.gamma, alpha),
        gamma: fit.gamma.clone(),
        degenerate: fit.degenerate,
    }
}

/// Runs the inner variational loop for one document from a cold start.
pub fn e_step_document(
    doc: &Document,
    model: &TopicModel,
    constraints: Option<&DocConstraints>,
    config: &TrainConfig,
) -> Result<DocTopicState, EngineError> {
    let work = prepare(doc, &model.topic_meta, model.vocab_size(), constraints)?;
    let gamma = cold_gamma(model.num_topics(), model.alpha, work.n_tokens);
    let fit = infer(&work, &model.beta, model.alpha, config, gamma);
    Ok(expand(&work, &fit, model.alpha))
}

/// `(topic, word)` pairs that get zero probability in every M-step.
///
/// Only populated under `global_exclusion`: pairs forbidden in some document
/// and clamped in none.
pub fn global_exclusions(
    meta: &[TopicMeta],
    constraints: &ConstraintSet,
    config: &TrainConfig,
) -> BTreeSet<(usize, usize)> {
    if !config.global_exclusion {
        return BTreeSet::new();
    }
    let topic_of = theme_topics(meta);
    let clamped = constraints.clamped_pairs();
    constraints
        .forbidden_pairs()
        .into_iter()
        .filter(|p| !clamped.contains(p))
        .filter_map(|(w, t)| topic_of.get(&t).map(|&k| (k, w)))
        .collect()
}

/// Smoothed topic-word estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Maximized {
    pub beta: Vec<Vec<f64>>,
    pub mass: Vec<f64>,
}

/// `beta[k][w] ∝ eta + stats[k][w]`, with excluded pairs pinned to zero.
pub fn m_step(
    stats: &[Vec<f64>],
    eta: f64,
    excluded: &BTreeSet<(usize, usize)>,
) -> Result<Maximized, EngineError> {
    let mut beta = Vec::with_capacity(stats.len());
    let mut mass = Vec::with_capacity(stats.len());
    for (k, row) in stats.iter().enumerate() {
        let mut out: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(w, s)| if excluded.contains(&(k, w)) { 0.0 } else { eta + s })
            .collect();
        let total: f64 = out.iter().sum();
        if total <= 0.0 {
            return Err(EngineError::AllForbidden(k));
        }
        for v in &mut out {
            *v /= total;
        }
        beta.push(out);
        mass.push(total);
    }
    Ok(Maximized { beta, mass })
}

/// Expected topic-word counts of one fitted document, added into `stats`.
pub(crate) fn accumulate(stats: &mut [Vec<f64>], work: &DocWork, phi: &[Vec<f64>]) {
    for ((&w, &c), row) in work.words.iter().zip(&work.counts).zip(phi) {
        for (t, p) in row.iter().enumerate() {
            stats[t][w] += c * p;
        }
    }
}

/// Per-document bound of variational LDA for given responsibilities
/// (`(word, count, row)` triples) and gamma.
pub(crate) fn doc_bound<'a>(
    entries: impl Iterator<Item = (usize, f64, &'a [f64])>,
    gamma: &[f64],
    beta: &[Vec<f64>],
    alpha: f64,
) -> Result<f64, EngineError> {
    let k = gamma.len();
    let gamma_sum: f64 = gamma.iter().sum();
    let psi_sum = digamma(gamma_sum);
    let elog: Vec<f64> = gamma.iter().map(|&g| digamma(g) - psi_sum).collect();

    let mut bound = ln_gamma(k as f64 * alpha) - k as f64 * ln_gamma(alpha);
    bound -= ln_gamma(gamma_sum);
    for t in 0..k {
        bound += (alpha - 1.0) * elog[t];
        bound += ln_gamma(gamma[t]) - (gamma[t] - 1.0) * elog[t];
    }
    for (w, count, row) in entries {
        for t in 0..k {
            let p = row[t];
            if p == 0.0 {
                continue;
            }
            let b = beta[t][w];
            if b <= 0.0 {
                return Err(EngineError::NonFinite(format!(
                    "word {w} has responsibility on topic {t} where its probability is zero"
                )));
            }
            bound += count * p * (elog[t] + b.ln() - p.ln());
        }
    }
    if bound.is_finite() {
        Ok(bound)
    } else {
        Err(EngineError::NonFinite("document bound".into()))
    }
}

pub(crate) fn work_bound(
    work: &DocWork,
    fit: &DocFit,
    beta: &[Vec<f64>],
    alpha: f64,
) -> Result<f64, EngineError> {
    let entries = work
        .words
        .iter()
        .zip(&work.counts)
        .zip(&fit.phi)
        .map(|((&w, &c), row)| (w, c, row.as_slice()));
    doc_bound(entries, &fit.gamma, beta, alpha)
}

/// Log density of the topics under the smoothing prior, a Dirichlet with
/// parameter `eta + 1` over each row's support. Entries pinned at zero are
/// outside the support and skipped.
pub fn topic_log_prior(beta: &[Vec<f64>], eta: f64) -> f64 {
    beta.iter()
        .map(|row| {
            let support: Vec<f64> = row.iter().copied().filter(|&b| b > 0.0).collect();
            let n = support.len() as f64;
            ln_gamma(n * (eta + 1.0)) - n * ln_gamma(eta + 1.0)
                + eta * support.iter().map(|b| b.ln()).sum::<f64>()
        })
        .sum()
}

/// Evidence lower bound of variational LDA summed over documents, computed
/// token by token from the published states. `0·log 0` counts as zero.
pub fn elbo(
    documents: &[Document],
    model: &TopicModel,
    states: &BTreeMap<String, DocTopicState>,
) -> Result<f64, EngineError> {
    let mut total = 0.0;
    for doc in documents {
        let state = states
            .get(&doc.doc_id)
            .ok_or_else(|| EngineError::UnknownDocument(doc.doc_id.clone()))?;
        let mut entries = Vec::with_capacity(state.tokens.len());
        for (&i, row) in state.tokens.iter().zip(&state.phi) {
            let w = doc
                .tokens
                .get(i)
                .and_then(|t| t.word_id)
                .ok_or_else(|| EngineError::UnknownDocument(doc.doc_id.clone()))?;
            entries.push((w, 1.0, row.as_slice()));
        }
        total += doc_bound(entries.into_iter(), &state.gamma, &model.beta, model.alpha)?;
    }
    Ok(total)
}

/// The objective EM climbs: the document bound plus the topic prior that
/// the smoothed M-step maximizes.
pub fn penalized_elbo(
    documents: &[Document],
    model: &TopicModel,
    states: &BTreeMap<String, DocTopicState>,
) -> Result<f64, EngineError> {
    Ok(elbo(documents, model, states)? + topic_log_prior(&model.beta, model.eta))
}
