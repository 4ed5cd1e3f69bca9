use std::collections::BTreeMap;
use std::ops::ControlFlow;

use rayon::prelude::*;

use super::inference::{
    accumulate, cold_gamma, expand, global_exclusions, infer, m_step, prepare, topic_log_prior,
    work_bound, DocFit, DocWork,
};
use super::init::{align_previous, initialize_model};
use super::model::{DocTopicState, FitTrace, Snapshot, ThemeSeed, TopicModel, TrainConfig};
use crate::annotation::ConstraintSet;
use crate::corpus::Corpus;
use crate::error::EngineError;

/// Read-only view of one finished EM iteration.
pub struct IterationView<'a> {
    pub iteration: usize,
    pub elbo: f64,
    pub beta: &'a [Vec<f64>],
    /// Responsibilities per document, one row per distinct word.
    pub phi: Vec<&'a [Vec<f64>]>,
}

/// Hook called after every EM iteration; `Break` cancels the run.
pub trait FitObserver {
    fn on_iteration(&mut self, view: &IterationView<'_>) -> ControlFlow<()>;
}

impl<F: FnMut(&IterationView<'_>) -> ControlFlow<()>> FitObserver for F {
    fn on_iteration(&mut self, view: &IterationView<'_>) -> ControlFlow<()> {
        self(view)
    }
}

struct Silent;

impl FitObserver for Silent {
    fn on_iteration(&mut self, _: &IterationView<'_>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: TopicModel,
    pub states: BTreeMap<String, DocTopicState>,
    pub trace: FitTrace,
}

impl FitOutput {
    pub fn into_snapshot(self, config: &TrainConfig) -> Snapshot {
        Snapshot {
            version: self.model.version,
            config: config.clone(),
            model: self.model,
            states: self.states,
            trace: self.trace,
        }
    }
}

/// Constrained variational EM.
///
/// With no themes and no constraints this is plain variational LDA over
/// `config.k_free` topics.
pub fn fit(
    corpus: &Corpus,
    themes: &[ThemeSeed],
    constraints: &ConstraintSet,
    config: &TrainConfig,
    prev: Option<&Snapshot>,
) -> Result<FitOutput, EngineError> {
    fit_with(corpus, themes, constraints, config, prev, &mut Silent)
}

pub fn fit_with(
    corpus: &Corpus,
    themes: &[ThemeSeed],
    constraints: &ConstraintSet,
    config: &TrainConfig,
    prev: Option<&Snapshot>,
    observer: &mut dyn FitObserver,
) -> Result<FitOutput, EngineError> {
    config.validate()?;
    let mut themes = themes.to_vec();
    themes.sort_by_key(|t| t.theme_id);

    let aligned = prev
        .map(|s| align_previous(&s.model, &s.states, &themes))
        .transpose()?;
    let words = corpus.vocab.words();
    let mut model = initialize_model(
        &themes,
        constraints,
        words,
        config,
        aligned.as_ref().map(|(m, _)| m),
    )?;
    let k = model.num_topics();
    let alpha = config.alpha;

    let works: Vec<DocWork> = corpus
        .documents
        .iter()
        .map(|d| prepare(d, &model.topic_meta, words.len(), constraints.get(&d.doc_id)))
        .collect::<Result<_, _>>()?;
    let mut gammas: Vec<Vec<f64>> = works
        .iter()
        .map(|w| {
            let cold = cold_gamma(k, alpha, w.n_tokens);
            let Some((prev_model, prev_states)) = &aligned else {
                return cold;
            };
            let Some(state) = prev_states.get(&w.doc_id) else {
                return cold;
            };
            warm_gamma(&model, prev_model, state, &cold)
        })
        .collect();
    let excluded = global_exclusions(&model.topic_meta, constraints, config);

    let mut trace = FitTrace::default();
    for iteration in 1..=config.max_em_iters {
        let fits: Vec<DocFit> = works
            .par_iter()
            .zip(gammas.par_iter())
            .map(|(w, g)| infer(w, &model.beta, alpha, config, g.clone()))
            .collect();

        let mut stats = vec![vec![0.0; words.len()]; k];
        for (w, f) in works.iter().zip(&fits) {
            accumulate(&mut stats, w, &f.phi);
        }
        let maximized = m_step(&stats, config.eta, &excluded)?;
        model.beta = maximized.beta;
        model.mass = maximized.mass;

        let bound: f64 = works
            .par_iter()
            .zip(fits.par_iter())
            .map(|(w, f)| work_bound(w, f, &model.beta, alpha))
            .collect::<Result<Vec<f64>, _>>()?
            .into_iter()
            .sum::<f64>()
            + topic_log_prior(&model.beta, config.eta);
        if !bound.is_finite() {
            return Err(EngineError::NonFinite("corpus bound".into()));
        }

        trace.iterations = iteration;
        trace.degenerate_tokens = fits.iter().map(|f| f.degenerate).sum();
        let previous = trace.elbo.last().copied();
        trace.elbo.push(bound);

        let view = IterationView {
            iteration,
            elbo: bound,
            beta: &model.beta,
            phi: fits.iter().map(|f| f.phi.as_slice()).collect(),
        };
        if observer.on_iteration(&view).is_break() {
            return Err(EngineError::Cancelled);
        }

        gammas = fits.into_iter().map(|f| f.gamma).collect();
        if let Some(p) = previous {
            if ((bound - p) / p.abs()).abs() < config.conv_tol {
                trace.converged = true;
                break;
            }
        }
    }

    // one more pass so the published states belong to the published topics
    let states: BTreeMap<String, DocTopicState> = works
        .par_iter()
        .zip(gammas.into_par_iter())
        .map(|(w, g)| {
            let f = infer(w, &model.beta, alpha, config, g);
            (w.doc_id.clone(), expand(w, &f, alpha))
        })
        .collect();

    model.version = prev.map_or(0, |s| s.version.max(s.model.version)) + 1;
    Ok(FitOutput {
        model,
        states,
        trace,
    })
}

/// Starting gamma for a document seen by the previous model: entries of
/// carried-over topics are reused, new topics start cold.
fn warm_gamma(model: &TopicModel, prev: &TopicModel, state: &DocTopicState, cold: &[f64]) -> Vec<f64> {
    let mut prev_free = (0..prev.num_topics()).filter(|&t| prev.topic_meta[t].is_free());
    model
        .topic_meta
        .iter()
        .enumerate()
        .map(|(k, meta)| {
            let source = match meta.theme_id() {
                Some(t) => prev.topic_of_theme(t),
                None => prev_free.next(),
            };
            source
                .and_then(|s| state.gamma.get(s).copied())
                .unwrap_or(cold[k])
        })
        .collect()
}
