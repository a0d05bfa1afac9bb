use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusError, Quadruple};

/// Token/id map. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabOptions {
    pub max_size: usize,
    /// Count description tokens as well as query and document tokens.
    pub include_descriptions: bool,
}

impl Default for VocabOptions {
    fn default() -> Self {
        Self {
            max_size: 120_000,
            include_descriptions: true,
        }
    }
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const BOS: u32 = 2;
    pub const EOS: u32 = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

    /// Rebuilds a vocabulary from its id-ordered token list, which must
    /// start with the four specials and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < 4 || tokens[..4].iter().zip(Self::SPECIALS).any(|(a, b)| a != b) {
            return Err(CorpusError::Vocabulary(
                "the first four entries must be the special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::Vocabulary(format!(
                    "invalid token {t:?} at id {i}"
                )));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Number of entries including the specials.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 4
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, or `UNK` when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        id < 4
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens of `ids`, skipping padding and sequence markers.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, Self::PAD | Self::BOS | Self::EOS))
            .map(|&id| self.token(id).unwrap_or(Self::SPECIALS[1]).to_string())
            .collect()
    }

    /// Short content hash used to detect files encoded with another vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        Self::from_tokens(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = CorpusError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(tokens)
    }
}

/// The `max_size` most frequent tokens, ties broken lexicographically,
/// after the four specials.
pub fn build_vocabulary(corpus: &[Quadruple], max_size: usize) -> Vocabulary {
    build_vocabulary_with(
        corpus,
        VocabOptions {
            max_size,
            ..VocabOptions::default()
        },
    )
}

pub fn build_vocabulary_with(corpus: &[Quadruple], options: VocabOptions) -> Vocabulary {
    fn add<'a>(counts: &mut HashMap<&'a str, u64>, tokens: &'a [String]) {
        for t in tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for q in corpus {
        add(&mut counts, &q.query);
        for sentence in q.relevant_docs.iter().chain(&q.irrelevant_docs).flatten() {
            add(&mut counts, sentence);
        }
        if options.include_descriptions {
            add(&mut counts, &q.description);
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !Vocabulary::SPECIALS.contains(t))
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = Vocabulary::SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(
            ranked
                .into_iter()
                .take(options.max_size)
                .map(|(t, _)| t.to_string()),
        )
        .collect();
    Vocabulary::from_tokens(tokens).expect("ranked tokens are unique and non-empty")
}
