//! Synthetic corpora drawn from known ("planted") topics, for checking that
//! the engine recovers what generated the data.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::annotation::AnnotationStore;
use crate::corpus::Document;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub num_docs: usize,
    pub doc_len: usize,
    pub vocab_size: usize,
    pub num_topics: usize,
    /// Symmetric Dirichlet parameter of the document proportions.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            num_docs: 200,
            doc_len: 50,
            vocab_size: 20,
            num_topics: 2,
            alpha: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub documents: Vec<Document>,
    /// `topics[k][w]`, indexed like `words`.
    pub topics: Vec<Vec<f64>>,
    /// Word types in sorted order, so they line up with a built vocabulary.
    pub words: Vec<String>,
    /// Generating topic of every token, per document.
    pub assignments: Vec<Vec<usize>>,
}

/// Word type `i` of a planted vocabulary.
pub fn planted_word(i: usize) -> String {
    format!("w{i:03}")
}

/// Planted topic rows: topic `k` owns a contiguous block of words with
/// geometrically decaying weights and leaves a small floor on the rest.
pub fn planted_topics(num_topics: usize, vocab_size: usize) -> Vec<Vec<f64>> {
    let block = vocab_size.div_ceil(num_topics.max(1));
    (0..num_topics)
        .map(|k| {
            let raw: Vec<f64> = (0..vocab_size)
                .map(|w| {
                    if w / block == k {
                        0.8f64.powi((w % block) as i32)
                    } else {
                        0.01
                    }
                })
                .collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        })
        .collect()
}

/// Draws a corpus from the LDA generative process over [`planted_topics`].
pub fn planted_corpus(spec: &PlantedSpec) -> PlantedCorpus {
    let topics = planted_topics(spec.num_topics, spec.vocab_size);
    let words: Vec<String> = (0..spec.vocab_size).map(planted_word).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let theta_dist = Gamma::new(spec.alpha, 1.0).expect("valid alpha");
    let word_dists: Vec<WeightedIndex<f64>> = topics
        .iter()
        .map(|row| WeightedIndex::new(row).expect("valid topic row"))
        .collect();

    let mut documents = Vec::with_capacity(spec.num_docs);
    let mut assignments = Vec::with_capacity(spec.num_docs);
    for d in 0..spec.num_docs {
        let theta: Vec<f64> = (0..spec.num_topics).map(|_| theta_dist.sample(&mut rng)).collect();
        let z_dist = WeightedIndex::new(&theta).unwrap_or_else(|_| {
            let mut one = vec![0.0; spec.num_topics];
            one[rng.random_range(0..spec.num_topics)] = 1.0;
            WeightedIndex::new(one).expect("one-hot weights")
        });
        let mut text = Vec::with_capacity(spec.doc_len);
        let mut zs = Vec::with_capacity(spec.doc_len);
        for _ in 0..spec.doc_len {
            let z = z_dist.sample(&mut rng);
            text.push(words[word_dists[z].sample(&mut rng)].as_str());
            zs.push(z);
        }
        documents.push(Document::new(format!("doc{d:04}"), text.join(" ")));
        assignments.push(zs);
    }
    PlantedCorpus {
        documents,
        topics,
        words,
        assignments,
    }
}

/// Label of the code standing for planted topic `k`.
pub fn planted_label(k: usize) -> String {
    format!("planted {k}")
}

/// The `n` most probable word ids of `row`, ties by id.
pub fn top_word_ids(row: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
    idx.truncate(n);
    idx
}

/// Codes the `n` top words of every planted topic the way a careful reader
/// would: a word is coded in a document only when all of its occurrences
/// there came from that topic. Themes are created in topic order, so theme
/// `k` stands for planted topic `k`. Returns the number of codes applied.
pub fn code_top_words(planted: &PlantedCorpus, documents: &[Document], store: &mut AnnotationStore, n: usize) -> usize {
    let mut applied = 0;
    for (k, row) in planted.topics.iter().enumerate() {
        let label = planted_label(k);
        for w in top_word_ids(row, n) {
            let word = &planted.words[w];
            for (d, doc) in documents.iter().enumerate() {
                let hits: Vec<usize> = doc
                    .tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| &t.surface == word)
                    .map(|(i, _)| i)
                    .collect();
                if hits.is_empty() || hits.iter().any(|&i| planted.assignments[d][i] != k) {
                    continue;
                }
                if store.apply_code(doc, doc.tokens[hits[0]].span, &label).is_ok() {
                    applied += 1;
                }
            }
        }
    }
    applied
}

/// L1 distance between two rows.
pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Smallest mean L1 between `estimated` and `planted` rows over all
/// assignments of estimated rows to planted ones, with the assignment.
pub fn best_permutation_l1(estimated: &[Vec<f64>], planted: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn search(
        i: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        cost: f64,
        est: &[Vec<f64>],
        planted: &[Vec<f64>],
        best: &mut (f64, Vec<usize>),
    ) {
        if i == planted.len() {
            if cost < best.0 {
                *best = (cost, cur.clone());
            }
            return;
        }
        for j in 0..est.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            cur.push(j);
            search(i + 1, used, cur, cost + l1(&est[j], &planted[i]), est, planted, best);
            cur.pop();
            used[j] = false;
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    search(
        0,
        &mut vec![false; estimated.len()],
        &mut Vec::new(),
        0.0,
        estimated,
        planted,
        &mut best,
    );
    (best.0 / planted.len().max(1) as f64, best.1)
}
