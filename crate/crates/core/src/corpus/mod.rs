//! Quadruple corpora: loading, preprocessing, vocabulary, id encoding and
//! deterministic splitting.

mod encode;
mod vocab;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encode::{
    encode_quadruple, EncodedDocument, EncodedQuadruple, LengthCaps, MaskedIds, PadSpec,
};
pub use vocab::{build_vocabulary, build_vocabulary_with, VocabOptions, Vocabulary};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: no relevant document survives preprocessing")]
    NoRelevant { line: usize },
    #[error("instance {id}: query is empty after preprocessing and truncation")]
    EmptyQuery { id: String },
    #[error("split sizes sum to {requested} but the corpus has {available} items")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
}

/// A document is a list of sentences, each a list of tokens.
pub type Document = Vec<Vec<String>>;

/// One training instance: query, relevant documents (at least one),
/// irrelevant documents (possibly none) and the reference description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadruple {
    pub id: String,
    pub query: Vec<String>,
    pub relevant_docs: Vec<Document>,
    pub irrelevant_docs: Vec<Document>,
    pub description: Vec<String>,
    pub meta: BTreeMap<String, String>,
}

impl Quadruple {
    pub fn query_type(&self) -> Option<&str> {
        self.meta.get("query_type").map(String::as_str)
    }
}

/// Line format of a corpus file. Sentences arrive pre-split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawQuadruple {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    pub relevant: Vec<Vec<String>>,
    #[serde(default)]
    pub irrelevant: Vec<Vec<String>>,
    pub description: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

/// Whitespace tokenization and lower-casing. Tokens without any ASCII
/// letter (pure digits, punctuation, non-Latin script) are dropped.
pub fn preprocess_text(raw: &str) -> Vec<String> {
    raw.split_whitespace()
        .filter(|t| t.bytes().any(|b| b.is_ascii_alphabetic()))
        .map(str::to_lowercase)
        .collect()
}

fn preprocess_document(sentences: &[String]) -> Document {
    sentences
        .iter()
        .map(|s| preprocess_text(s))
        .filter(|s| !s.is_empty())
        .collect()
}

fn preprocess_documents(docs: &[Vec<String>]) -> Vec<Document> {
    docs.iter()
        .map(|d| preprocess_document(d))
        .filter(|d| !d.is_empty())
        .collect()
}

impl RawQuadruple {
    /// Preprocesses every field. `line` is 1-based and only used for
    /// error reporting and the default id.
    pub fn preprocess(&self, line: usize) -> Result<Quadruple, CorpusError> {
        let relevant_docs = preprocess_documents(&self.relevant);
        if relevant_docs.is_empty() {
            return Err(CorpusError::NoRelevant { line });
        }
        Ok(Quadruple {
            id: self.id.clone().unwrap_or_else(|| format!("line-{line}")),
            query: preprocess_text(&self.query),
            relevant_docs,
            irrelevant_docs: preprocess_documents(&self.irrelevant),
            description: preprocess_text(&self.description),
            meta: self.meta.clone(),
        })
    }
}

/// Parses JSONL quadruples from a reader. Blank lines are skipped.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Quadruple>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawQuadruple =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        out.push(raw.preprocess(line_no)?);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Quadruple>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(BufReader::new(file))
}

/// Train/validation/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles under `seed` and cuts the first `train + valid + test` items
/// into three disjoint parts.
pub fn split_corpus<T: Clone>(
    items: &[T],
    seed: u64,
    (train, valid, test): (usize, usize, usize),
) -> Result<Split<T>, CorpusError> {
    let requested = train + valid + test;
    if requested > items.len() {
        return Err(CorpusError::SplitTooLarge {
            requested,
            available: items.len(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take =
        |range: std::ops::Range<usize>| order[range].iter().map(|&i| items[i].clone()).collect();
    Ok(Split {
        train: take(0..train),
        valid: take(train..train + valid),
        test: take(train + valid..requested),
    })
}

/// Corpus summary in the shape of the dataset statistics table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub queries: usize,
    pub avg_query_words: f64,
    pub avg_relevant_docs: f64,
    pub avg_irrelevant_docs: f64,
    pub relevant_docs: usize,
    pub irrelevant_docs: usize,
    pub avg_relevant_doc_sentences: f64,
    pub avg_irrelevant_doc_sentences: f64,
    pub avg_description_words: f64,
    pub queries_without_irrelevant: usize,
}

fn mean(total: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

impl CorpusStats {
    pub fn compute(corpus: &[Quadruple]) -> Self {
        let n = corpus.len();
        let sum = |f: &dyn Fn(&Quadruple) -> usize| corpus.iter().map(f).sum::<usize>();
        let relevant_docs = sum(&|q| q.relevant_docs.len());
        let irrelevant_docs = sum(&|q| q.irrelevant_docs.len());
        let relevant_sentences = sum(&|q| q.relevant_docs.iter().map(Vec::len).sum());
        let irrelevant_sentences = sum(&|q| q.irrelevant_docs.iter().map(Vec::len).sum());
        Self {
            queries: n,
            avg_query_words: mean(sum(&|q| q.query.len()), n),
            avg_relevant_docs: mean(relevant_docs, n),
            avg_irrelevant_docs: mean(irrelevant_docs, n),
            relevant_docs,
            irrelevant_docs,
            avg_relevant_doc_sentences: mean(relevant_sentences, relevant_docs),
            avg_irrelevant_doc_sentences: mean(irrelevant_sentences, irrelevant_docs),
            avg_description_words: mean(sum(&|q| q.description.len()), n),
            queries_without_irrelevant: corpus
                .iter()
                .filter(|q| q.irrelevant_docs.is_empty())
                .count(),
        }
    }
}
