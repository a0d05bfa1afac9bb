//! ROUGE recall and sliced corpus reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedQuadruple, Vocabulary};
use crate::decoder::{generate, Strategy};
use crate::model::{ModelError, ModelParams};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference has {len} tokens, fewer than n = {n}")]
    ShortReference { n: usize, len: usize },
    #[error("n must be at least 1")]
    ZeroN,
    #[error("instance {id}: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error("instance {id} was encoded with vocabulary {found}, model uses {expected}")]
    VocabularyMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("{0} predictions for {1} instances")]
    CountMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap divided by the number of reference n-grams.
pub fn rouge_n<S: AsRef<str>>(
    candidate: &[S],
    reference: &[S],
    n: usize,
) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroN);
    }
    if reference.len() < n {
        return Err(EvalError::ShortReference {
            n,
            len: reference.len(),
        });
    }
    let cand = ngrams(candidate, n);
    let refs = ngrams(reference, n);
    let overlap: usize = refs
        .iter()
        .map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(overlap as f64 / (reference.len() + 1 - n) as f64)
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() {
                diag + 1
            } else {
                up.max(row[j])
            };
            diag = up;
        }
    }
    row[b.len()]
}

/// Longest common subsequence length divided by the reference length.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::ShortReference { n: 1, len: 0 });
    }
    Ok(lcs_len(candidate, reference) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1_recall: f64,
    pub rouge2_recall: f64,
    #[serde(rename = "rougeL_recall")]
    pub rouge_l_recall: f64,
}

impl RougeScores {
    pub fn score<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<Self, EvalError> {
        Ok(Self {
            rouge1_recall: rouge_n(candidate, reference, 1)?,
            rouge2_recall: rouge_n(candidate, reference, 2)?,
            rouge_l_recall: rouge_l(candidate, reference)?,
        })
    }

    pub fn mean<'a>(scores: impl IntoIterator<Item = &'a RougeScores>) -> Self {
        let mut sum = Self::default();
        let mut n = 0usize;
        for s in scores {
            sum.rouge1_recall += s.rouge1_recall;
            sum.rouge2_recall += s.rouge2_recall;
            sum.rouge_l_recall += s.rouge_l_recall;
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        Self {
            rouge1_recall: sum.rouge1_recall / n,
            rouge2_recall: sum.rouge2_recall / n,
            rouge_l_recall: sum.rouge_l_recall / n,
        }
    }
}

/// Upper bounds of the relevant-sentence-count bins; the last bin is open.
pub const SENTENCE_BINS: [usize; 6] = [40, 80, 120, 160, 200, 240];

/// Label of the bin holding `count` sentences: `<40`, `40-80`, …, `>240`.
pub fn sentence_bin(count: usize) -> String {
    if count < SENTENCE_BINS[0] {
        return format!("<{}", SENTENCE_BINS[0]);
    }
    for w in SENTENCE_BINS.windows(2) {
        if count < w[1] {
            return format!("{}-{}", w[0], w[1]);
        }
    }
    // 240 itself falls in the open bin
    format!(">{}", SENTENCE_BINS[SENTENCE_BINS.len() - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKey {
    /// `meta.query_type`, `unknown` when absent.
    QueryType,
    /// `with` or `without` irrelevant documents.
    Irrelevant,
    /// Relevant sentence count before truncation, binned.
    Sentences,
}

impl SliceKey {
    pub const ALL: [SliceKey; 3] = [
        SliceKey::QueryType,
        SliceKey::Irrelevant,
        SliceKey::Sentences,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SliceKey::QueryType => "query_type",
            SliceKey::Irrelevant => "irrelevant",
            SliceKey::Sentences => "sentences",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn value(self, quad: &EncodedQuadruple) -> String {
        match self {
            SliceKey::QueryType => quad.query_type().unwrap_or("unknown").to_string(),
            SliceKey::Irrelevant => if quad.has_irrelevant() {
                "with"
            } else {
                "without"
            }
            .to_string(),
            SliceKey::Sentences => sentence_bin(quad.relevant_sentences),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub prediction: Vec<String>,
    pub reference: Vec<String>,
    #[serde(flatten)]
    pub scores: RougeScores,
    /// Slice key name to slice value.
    pub slices: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub count: usize,
    #[serde(flatten)]
    pub scores: RougeScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub overall: SliceReport,
    /// Slice key name, then slice value.
    pub slices: BTreeMap<String, BTreeMap<String, SliceReport>>,
    pub per_instance: Vec<InstanceScore>,
}

impl RougeReport {
    /// `key  value  count  rouge1  rouge2  rougeL`, overall first.
    pub fn to_tsv(&self) -> String {
        let mut out =
            String::from("slice\tvalue\tcount\trouge1_recall\trouge2_recall\trougeL_recall\n");
        let mut row = |k: &str, v: &str, r: &SliceReport| {
            let s = r.scores;
            writeln!(
                out,
                "{k}\t{v}\t{}\t{}\t{}\t{}",
                r.count, s.rouge1_recall, s.rouge2_recall, s.rouge_l_recall
            )
            .expect("writing to a String");
        };
        row("overall", "all", &self.overall);
        for (k, values) in &self.slices {
            for (v, r) in values {
                row(k, v, r);
            }
        }
        out
    }
}

/// Scores `predictions[i]` against the reference of `data[i]` and
/// aggregates overall and per slice.
pub fn score_predictions(
    data: &[EncodedQuadruple],
    predictions: &[Vec<String>],
    keys: &[SliceKey],
) -> Result<RougeReport, EvalError> {
    if data.len() != predictions.len() {
        return Err(EvalError::CountMismatch(predictions.len(), data.len()));
    }
    let per_instance = data
        .iter()
        .zip(predictions)
        .map(|(q, p)| {
            let scores = RougeScores::score(p, &q.reference).map_err(|e| EvalError::Instance {
                id: q.id.clone(),
                source: Box::new(e),
            })?;
            Ok(InstanceScore {
                id: q.id.clone(),
                prediction: p.clone(),
                reference: q.reference.clone(),
                scores,
                slices: keys
                    .iter()
                    .map(|k| (k.name().to_string(), k.value(q)))
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let report = |items: &[&InstanceScore]| SliceReport {
        count: items.len(),
        scores: RougeScores::mean(items.iter().map(|i| &i.scores)),
    };
    let all: Vec<&InstanceScore> = per_instance.iter().collect();
    let mut slices = BTreeMap::new();
    for k in keys {
        let mut groups: BTreeMap<String, Vec<&InstanceScore>> = BTreeMap::new();
        for i in &per_instance {
            groups
                .entry(i.slices[k.name()].clone())
                .or_default()
                .push(i);
        }
        slices.insert(
            k.name().to_string(),
            groups
                .into_iter()
                .map(|(v, items)| (v, report(&items)))
                .collect(),
        );
    }
    Ok(RougeReport {
        overall: report(&all),
        slices,
        per_instance,
    })
}

/// Decodes every instance (in parallel, order preserved) and returns the
/// predicted tokens.
pub fn generate_all<T: Real>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    data: &[EncodedQuadruple],
    max_len: usize,
    strategy: Strategy,
) -> Result<Vec<Vec<String>>, EvalError> {
    let expected = vocab.fingerprint();
    for q in data {
        if !q.vocab_fingerprint.is_empty() && q.vocab_fingerprint != expected {
            return Err(EvalError::VocabularyMismatch {
                id: q.id.clone(),
                expected,
                found: q.vocab_fingerprint.clone(),
            });
        }
    }
    data.par_iter()
        .map(|q| Ok(vocab.decode(&generate(params, q, max_len, strategy)?.tokens)))
        .collect()
}

/// Generates for every instance and scores against the references.
pub fn evaluate_corpus<T: Real>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    data: &[EncodedQuadruple],
    keys: &[SliceKey],
    max_len: usize,
    strategy: Strategy,
) -> Result<RougeReport, EvalError> {
    let predictions = generate_all(params, vocab, data, max_len, strategy)?;
    score_predictions(data, &predictions, keys)
}
