//! Initial topics: seeded from coded words, carried over from a previous
//! model, or drawn at random for free topics. Also the structural edits
//! (merge, split) applied to a model between training runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::model::{DocTopicState, ThemeSeed, TopicMeta, TopicModel, TrainConfig};
use crate::annotation::ConstraintSet;
use crate::error::EngineError;

/// Row with `seed_mass` spread evenly over `coded` and the rest evenly over
/// every other word. Degenerates to uniform when nothing (or everything) is coded.
pub fn seeded_row(vocab_size: usize, coded: &BTreeSet<usize>, seed_mass: f64) -> Vec<f64> {
    let c = coded.len();
    if c == 0 || c == vocab_size {
        return vec![1.0 / vocab_size as f64; vocab_size];
    }
    let hi = seed_mass / c as f64;
    let lo = (1.0 - seed_mass) / (vocab_size - c) as f64;
    (0..vocab_size)
        .map(|w| if coded.contains(&w) { hi } else { lo })
        .collect()
}

/// Draw from a symmetric Dirichlet(`eta`) over `vocab_size` words.
fn dirichlet_row(rng: &mut ChaCha8Rng, vocab_size: usize, eta: f64) -> Vec<f64> {
    let gamma = Gamma::new(eta, 1.0).expect("eta validated positive");
    loop {
        let draws: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

/// Random rows for `count` free topics, reproducible from `rng_seed`.
pub fn free_rows(config: &TrainConfig, vocab_size: usize, count: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    (0..count)
        .map(|_| dirichlet_row(&mut rng, vocab_size, config.eta))
        .collect()
}

/// Previous topic rows expressed over the current vocabulary. Words the
/// previous model never saw get a pseudo-count of `eta`.
fn carry_row(prev: &TopicModel, k: usize, words: &[String], same_vocab: bool, eta: f64) -> (Vec<f64>, f64) {
    if same_vocab {
        return (prev.beta[k].clone(), prev.mass[k]);
    }
    let index: HashMap<&str, usize> = prev
        .words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mass = prev.mass[k];
    let counts: Vec<f64> = words
        .iter()
        .map(|w| match index.get(w.as_str()) {
            Some(&i) => prev.beta[k][i] * mass,
            None => eta,
        })
        .collect();
    let total: f64 = counts.iter().sum();
    (counts.iter().map(|c| c / total).collect(), total)
}

/// Builds the starting model for a training run.
///
/// Themed topics come first, in the order of `themes`, followed by
/// `config.k_free` free topics. With `prev`, topics whose theme survives are
/// carried over (and re-blended toward the theme's coded words if new ones
/// appeared); other topics are seeded afresh. Forbidden `(word, theme)` pairs
/// start at zero probability.
pub fn initialize_model(
    themes: &[ThemeSeed],
    constraints: &ConstraintSet,
    words: &[String],
    config: &TrainConfig,
    prev: Option<&TopicModel>,
) -> Result<TopicModel, EngineError> {
    config.validate()?;
    let k = themes.len() + config.k_free;
    if k == 0 {
        return Err(EngineError::NoTopics);
    }
    let v = words.len();
    if v == 0 {
        return Err(EngineError::InvalidConfig("empty vocabulary".into()));
    }
    let prior_mass = config.eta * v as f64;
    let same_vocab = prev.is_some_and(|p| p.words == words);

    let mut beta = Vec::with_capacity(k);
    let mut mass = Vec::with_capacity(k);
    let mut meta = Vec::with_capacity(k);

    for theme in themes {
        let coded = constraints.coded_words(theme.theme_id);
        let coded_words: Vec<String> = coded.iter().map(|&w| words[w].clone()).collect();
        let carried = prev.and_then(|p| {
            p.topic_of_theme(theme.theme_id).map(|pk| {
                let (row, m) = carry_row(p, pk, words, same_vocab, config.eta);
                let before: BTreeSet<&str> = match &p.topic_meta[pk] {
                    TopicMeta::Themed { coded_words, .. } => coded_words.iter().map(String::as_str).collect(),
                    TopicMeta::Free => BTreeSet::new(),
                };
                (row, m, coded_words.iter().any(|w| !before.contains(w.as_str())))
            })
        });
        let (row, m) = match carried {
            Some((row, m, false)) => (row, m),
            Some((row, m, true)) => {
                let seed = seeded_row(v, &coded, config.seed_mass);
                let blended = row
                    .iter()
                    .zip(&seed)
                    .map(|(r, s)| (1.0 - config.seed_mass) * r + config.seed_mass * s)
                    .collect();
                (blended, m)
            }
            None => (seeded_row(v, &coded, config.seed_mass), prior_mass),
        };
        beta.push(row);
        mass.push(m);
        meta.push(TopicMeta::Themed {
            theme_id: theme.theme_id,
            name: theme.name.clone(),
            code_ids: theme.code_ids.clone(),
            coded_words,
        });
    }

    let prev_free: Vec<usize> = prev
        .map(|p| (0..p.num_topics()).filter(|&t| p.topic_meta[t].is_free()).collect())
        .unwrap_or_default();
    let fresh = free_rows(config, v, config.k_free);
    for (j, row) in fresh.into_iter().enumerate() {
        match (prev, prev_free.get(j)) {
            (Some(p), Some(&pk)) => {
                let (row, m) = carry_row(p, pk, words, same_vocab, config.eta);
                beta.push(row);
                mass.push(m);
            }
            _ => {
                beta.push(row);
                mass.push(prior_mass);
            }
        }
        meta.push(TopicMeta::Free);
    }

    let topic_of: HashMap<u64, usize> = themes
        .iter()
        .enumerate()
        .map(|(k, t)| (t.theme_id, k))
        .collect();
    let mut touched = BTreeSet::new();
    for (w, theme) in constraints.forbidden_pairs() {
        if let Some(&t) = topic_of.get(&theme) {
            if beta[t][w] != 0.0 {
                beta[t][w] = 0.0;
                touched.insert(t);
            }
        }
    }
    for t in touched {
        let total: f64 = beta[t].iter().sum();
        if total <= 0.0 {
            return Err(EngineError::AllForbidden(t));
        }
        for b in &mut beta[t] {
            *b /= total;
        }
    }

    Ok(TopicModel {
        words: words.to_vec(),
        beta,
        mass,
        alpha: config.alpha,
        eta: config.eta,
        topic_meta: meta,
        version: prev.map_or(0, |p| p.version),
    })
}

/// Folds themed topic `b` into themed topic `a`.
///
/// Pseudo-counts add, so the merged row is the mass-weighted average of the
/// two rows. In every document state gamma, theta_hat and the responsibility
/// columns of the pair are summed. Topic `b` is removed and later indices
/// shift down by one.
pub fn merge_topics(
    model: &TopicModel,
    a: usize,
    b: usize,
    states: &BTreeMap<String, DocTopicState>,
) -> Result<(TopicModel, BTreeMap<String, DocTopicState>), EngineError> {
    let k = model.num_topics();
    for t in [a, b] {
        if t >= k {
            return Err(EngineError::TopicOutOfRange(t));
        }
        if model.topic_meta[t].is_free() {
            return Err(EngineError::FreeTopicMerge(t));
        }
    }
    if a == b {
        return Err(EngineError::SameTopic(a));
    }

    let mut out = model.clone();
    let (ma, mb) = (model.mass[a], model.mass[b]);
    let merged_mass = ma + mb;
    out.beta[a] = model.beta[a]
        .iter()
        .zip(&model.beta[b])
        .map(|(x, y)| (x * ma + y * mb) / merged_mass)
        .collect();
    out.mass[a] = merged_mass;
    if let (
        TopicMeta::Themed { code_ids, coded_words, .. },
        TopicMeta::Themed {
            code_ids: other_codes,
            coded_words: other_words,
            ..
        },
    ) = (&mut out.topic_meta[a], &model.topic_meta[b])
    {
        code_ids.extend(other_codes.iter().filter(|c| !code_ids.contains(c)).copied().collect::<Vec<_>>());
        let all: BTreeSet<String> = coded_words.iter().chain(other_words).cloned().collect();
        *coded_words = all.into_iter().collect();
    }
    out.beta.remove(b);
    out.mass.remove(b);
    out.topic_meta.remove(b);

    let fold = |v: &mut Vec<f64>| {
        let moved = v[b];
        v[a] += moved;
        v.remove(b);
    };
    let states = states
        .iter()
        .map(|(id, s)| {
            let mut s = s.clone();
            fold(&mut s.gamma);
            fold(&mut s.theta_hat);
            s.phi.iter_mut().for_each(fold);
            (id.clone(), s)
        })
        .collect();
    Ok((out, states))
}

/// Adds a topic for a theme split off from the one at `topic`.
///
/// The new row is seeded from the new theme's coded words; the original
/// topic keeps its parameters but loses the departing codes.
pub fn split_topic(
    model: &TopicModel,
    topic: usize,
    new_theme: &ThemeSeed,
    constraints: &ConstraintSet,
    config: &TrainConfig,
) -> Result<TopicModel, EngineError> {
    let Some(meta) = model.topic_meta.get(topic) else {
        return Err(EngineError::TopicOutOfRange(topic));
    };
    let TopicMeta::Themed { code_ids, .. } = meta else {
        return Err(EngineError::LastCode(topic));
    };
    if code_ids.len() < 2 || new_theme.code_ids.iter().any(|c| !code_ids.contains(c)) {
        return Err(EngineError::LastCode(topic));
    }

    let v = model.vocab_size();
    let coded = constraints.coded_words(new_theme.theme_id);
    let mut out = model.clone();
    if let TopicMeta::Themed { code_ids, .. } = &mut out.topic_meta[topic] {
        code_ids.retain(|c| !new_theme.code_ids.contains(c));
    }
    let at = out.themed_count();
    out.beta.insert(at, seeded_row(v, &coded, config.seed_mass));
    out.mass.insert(at, config.eta * v as f64);
    out.topic_meta.insert(
        at,
        TopicMeta::Themed {
            theme_id: new_theme.theme_id,
            name: new_theme.name.clone(),
            code_ids: new_theme.code_ids.clone(),
            coded_words: coded.iter().map(|&w| model.words[w].clone()).collect(),
        },
    );
    Ok(out)
}

/// Brings a previous snapshot's topics in line with the current themes.
///
/// A topic whose theme has been retired is merged into the topic of the
/// theme that now holds its codes; if that theme had no topic yet the
/// retired topic is simply rebound to it. Topics whose codes have all
/// vanished are dropped.
pub fn align_previous(
    model: &TopicModel,
    states: &BTreeMap<String, DocTopicState>,
    themes: &[ThemeSeed],
) -> Result<(TopicModel, BTreeMap<String, DocTopicState>), EngineError> {
    let live: BTreeSet<u64> = themes.iter().map(|t| t.theme_id).collect();
    let mut model = model.clone();
    let mut states = states.clone();

    while let Some(k) = model
        .topic_meta
        .iter()
        .position(|m| m.theme_id().is_some_and(|t| !live.contains(&t)))
    {
        let TopicMeta::Themed { code_ids, .. } = &model.topic_meta[k] else {
            unreachable!()
        };
        let heir = code_ids
            .iter()
            .find_map(|c| themes.iter().find(|t| t.code_ids.contains(c)));
        match heir {
            Some(theme) => match model.topic_of_theme(theme.theme_id) {
                Some(target) => {
                    (model, states) = merge_topics(&model, target, k, &states)?;
                }
                None => {
                    if let TopicMeta::Themed { theme_id, name, .. } = &mut model.topic_meta[k] {
                        *theme_id = theme.theme_id;
                        name.clone_from(&theme.name);
                    }
                }
            },
            None => {
                model.beta.remove(k);
                model.mass.remove(k);
                model.topic_meta.remove(k);
                for s in states.values_mut() {
                    s.gamma.remove(k);
                    s.theta_hat.remove(k);
                    s.phi.iter_mut().for_each(|row| {
                        row.remove(k);
                    });
                }
            }
        }
    }
    Ok((model, states))
}
