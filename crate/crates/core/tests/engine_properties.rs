use std::ops::ControlFlow;

use proptest::prelude::*;
use themetopic_core::engine::{fit, fit_with, IterationView};
use themetopic_core::synth::{planted_corpus, PlantedSpec};
use themetopic_core::{
    derive_constraints, AnnotationStore, ConstraintSet, Corpus, CorpusSettings, Document,
    ThemeSeed, TrainConfig,
};

fn random_corpus(seed: u64, docs: usize, vocab: usize, len: usize, topics: usize) -> Corpus {
    let planted = planted_corpus(&PlantedSpec {
        num_docs: docs,
        doc_len: len,
        vocab_size: vocab,
        num_topics: topics,
        alpha: 0.5,
        seed,
    });
    Corpus::build(planted.documents, CorpusSettings::default()).unwrap()
}

fn assert_simplex(view: &IterationView<'_>, tol: f64) {
    for (k, row) in view.beta.iter().enumerate() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() <= tol, "beta row {k} sums to {s}");
        assert!(row.iter().all(|b| *b >= 0.0));
    }
    for rows in &view.phi {
        for row in rows.iter() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= tol, "phi row sums to {s}");
        }
    }
}

#[test]
fn unconstrained_elbo_never_decreases() {
    for seed in 0..20u64 {
        let corpus = random_corpus(seed, 50, 30, 20, 3);
        let cfg = TrainConfig {
            k_free: 3,
            rng_seed: seed,
            ..TrainConfig::default()
        };
        let mut check = |view: &IterationView<'_>| {
            assert_simplex(view, 1e-10);
            ControlFlow::Continue(())
        };
        let out = fit_with(&corpus, &[], &ConstraintSet::default(), &cfg, None, &mut check).unwrap();
        for (i, w) in out.trace.elbo.windows(2).enumerate() {
            assert!(
                w[1] >= w[0] - 1e-8 * w[0].abs(),
                "corpus {seed}, iteration {}: {} < {}",
                i + 2,
                w[1],
                w[0]
            );
        }
    }
}

#[test]
fn published_states_are_distributions() {
    let corpus = random_corpus(5, 30, 20, 15, 2);
    let out = fit(
        &corpus,
        &[],
        &ConstraintSet::default(),
        &TrainConfig {
            k_free: 4,
            ..TrainConfig::default()
        },
        None,
    )
    .unwrap();
    for state in out.states.values() {
        let theta: f64 = state.theta_hat.iter().sum();
        assert!((theta - 1.0).abs() < 1e-10);
        for row in &state.phi {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

fn coded_fixture(seed: u64, codes: &[(usize, usize, u8)]) -> (Corpus, AnnotationStore) {
    let corpus = random_corpus(seed, 12, 10, 8, 2);
    let mut store = AnnotationStore::new();
    for &(d, t, label) in codes {
        let doc: &Document = &corpus.documents[d % corpus.len()];
        let tok = &doc.tokens[t % doc.tokens.len()];
        store
            .apply_code(doc, tok.span, &format!("theme {}", label % 3))
            .unwrap();
    }
    (corpus, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constrained_fits_keep_simplex_and_exact_clamps(
        seed in 0u64..1000,
        codes in prop::collection::vec((0usize..12, 0usize..8, 0u8..3), 1..8),
        k_free in 0usize..3,
        global_exclusion in any::<bool>(),
    ) {
        let (corpus, store) = coded_fixture(seed, &codes);
        let themes: Vec<ThemeSeed> = store.themes().iter().map(ThemeSeed::from).collect();
        let cs = derive_constraints(&store, &corpus.documents);
        let cfg = TrainConfig { k_free, rng_seed: seed, max_em_iters: 15, global_exclusion, ..TrainConfig::default() };
        let mut check = |view: &IterationView<'_>| {
            assert_simplex(view, 1e-10);
            ControlFlow::Continue(())
        };
        let out = fit_with(&corpus, &themes, &cs, &cfg, None, &mut check).unwrap();
        prop_assert_eq!(out.model.num_topics(), themes.len() + k_free);

        for doc in &corpus.documents {
            let state = &out.states[&doc.doc_id];
            let Some(dc) = cs.get(&doc.doc_id) else { continue };
            for (&i, row) in state.tokens.iter().zip(&state.phi) {
                let w = doc.tokens[i].word_id.unwrap();
                let Some(set) = dc.clamp.get(&w) else { continue };
                let share = 1.0 / set.len() as f64;
                for (k, p) in row.iter().enumerate() {
                    let bound = out.model.topic_meta[k].theme_id().is_some_and(|t| set.contains(&t));
                    prop_assert_eq!(*p, if bound { share } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn fits_are_deterministic(seed in 0u64..1000, k_free in 1usize..4) {
        let corpus = random_corpus(seed, 10, 12, 10, 2);
        let cfg = TrainConfig { k_free, rng_seed: seed, max_em_iters: 10, ..TrainConfig::default() };
        let a = fit(&corpus, &[], &ConstraintSet::default(), &cfg, None).unwrap();
        let b = fit(&corpus, &[], &ConstraintSet::default(), &cfg, None).unwrap();
        prop_assert_eq!(a.trace.elbo, b.trace.elbo);
        prop_assert_eq!(a.model.beta, b.model.beta);
    }

    #[test]
    fn small_unconstrained_fits_are_monotone(seed in 0u64..10_000, k in 1usize..5, docs in 2usize..15) {
        let corpus = random_corpus(seed, docs, 8, 6, 2);
        let cfg = TrainConfig { k_free: k, rng_seed: seed, max_em_iters: 25, ..TrainConfig::default() };
        let out = fit(&corpus, &[], &ConstraintSet::default(), &cfg, None).unwrap();
        for w in out.trace.elbo.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} < {}", w[1], w[0]);
        }
    }
}

#[test]
fn stopped_only_documents_have_empty_states() {
    let docs = vec![
        Document::new("a", "the cat sat"),
        Document::new("b", "the the"),
    ];
    let settings = CorpusSettings {
        stoplist: ["the".to_string()].into_iter().collect(),
        ..CorpusSettings::default()
    };
    let corpus = Corpus::build(docs, settings).unwrap();
    let out = fit(&corpus, &[], &ConstraintSet::default(), &TrainConfig::default(), None).unwrap();
    let b = &out.states["b"];
    assert!(b.tokens.is_empty());
    assert!((b.theta_hat.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
