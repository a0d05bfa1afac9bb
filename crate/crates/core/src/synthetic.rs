//! Deterministic toy corpora for tests, benchmarks and smoke runs.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Quadruple;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub instances: usize,
    /// Size of the word pool; every generated token comes from it.
    pub words: usize,
    pub query_len: RangeInclusive<usize>,
    pub relevant_docs: RangeInclusive<usize>,
    pub irrelevant_docs: RangeInclusive<usize>,
    pub sentences: RangeInclusive<usize>,
    pub sentence_len: RangeInclusive<usize>,
    pub description_len: RangeInclusive<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            instances: 8,
            words: 50,
            query_len: 2..=3,
            relevant_docs: 1..=2,
            irrelevant_docs: 0..=2,
            sentences: 1..=3,
            sentence_len: 3..=6,
            description_len: 3..=8,
        }
    }
}

/// Pool word `i`: a lowercase letter string, distinct for distinct `i`.
pub fn word(mut i: usize) -> String {
    let mut s = String::from("w");
    loop {
        s.push((b'a' + (i % 26) as u8) as char);
        i /= 26;
        if i == 0 {
            break s;
        }
    }
}

/// Generates `spec.instances` quadruples. Each instance draws a topic
/// (a small word subset); its query, relevant sentences and description
/// favour topic words, irrelevant sentences favour the rest of the pool.
pub fn synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Vec<Quadruple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..spec.words.max(2)).map(word).collect();
    let draw = |rng: &mut ChaCha8Rng, r: &RangeInclusive<usize>| rng.gen_range(r.clone());
    (0..spec.instances)
        .map(|n| {
            let mut shuffled = pool.clone();
            shuffled.shuffle(&mut rng);
            let split = (pool.len() / 3).max(1);
            let (topic, other) = shuffled.split_at(split);
            let sentence = |rng: &mut ChaCha8Rng, words: &[String], other: &[String]| {
                let len = draw(rng, &spec.sentence_len).max(1);
                (0..len)
                    .map(|_| {
                        let src = if other.is_empty() || rng.gen_bool(0.7) {
                            words
                        } else {
                            other
                        };
                        src[rng.gen_range(0..src.len())].clone()
                    })
                    .collect::<Vec<_>>()
            };
            let doc = |rng: &mut ChaCha8Rng, words: &[String], other: &[String]| {
                let count = draw(rng, &spec.sentences).max(1);
                (0..count)
                    .map(|_| sentence(rng, words, other))
                    .collect::<Vec<_>>()
            };
            let query_len = draw(&mut rng, &spec.query_len).max(1);
            let query = topic.iter().take(query_len).cloned().collect();
            let relevant_count = draw(&mut rng, &spec.relevant_docs).max(1);
            let relevant_docs = (0..relevant_count)
                .map(|_| doc(&mut rng, topic, other))
                .collect();
            let irrelevant_count = draw(&mut rng, &spec.irrelevant_docs);
            let irrelevant_docs = (0..irrelevant_count)
                .map(|_| doc(&mut rng, other, topic))
                .collect();
            let description_len = draw(&mut rng, &spec.description_len).max(1);
            let description = (0..description_len)
                .map(|i| topic[i % topic.len()].clone())
                .collect();
            let mut meta = BTreeMap::new();
            let kind = if n % 3 == 0 { "keyword" } else { "question" };
            meta.insert("query_type".to_string(), kind.to_string());
            Quadruple {
                id: format!("syn-{n}"),
                query,
                relevant_docs,
                irrelevant_docs,
                description,
                meta,
            }
        })
        .collect()
}
