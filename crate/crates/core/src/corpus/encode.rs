use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Document, Quadruple, Vocabulary};

/// Truncation limits applied when encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthCaps {
    /// Query tokens (C).
    pub query: usize,
    /// Tokens per sentence (L), documents of both kinds.
    pub sentence: usize,
    /// Mega-document sentences (U); also caps sentences per irrelevant document.
    pub sentences: usize,
    /// Description tokens (Z), excluding the BOS/EOS markers.
    pub description: usize,
}

impl Default for LengthCaps {
    fn default() -> Self {
        Self {
            query: 20,
            sentence: 50,
            sentences: 240,
            description: 60,
        }
    }
}

/// Ids with a parallel mask; `false` marks padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskedIdsRepr", into = "MaskedIdsRepr")]
pub struct MaskedIds {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

// Files omit the mask when nothing is padded.
#[derive(Serialize, Deserialize)]
struct MaskedIdsRepr {
    ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
}

impl TryFrom<MaskedIdsRepr> for MaskedIds {
    type Error = String;

    fn try_from(r: MaskedIdsRepr) -> Result<Self, String> {
        let mask = r.mask.unwrap_or_else(|| vec![true; r.ids.len()]);
        if mask.len() != r.ids.len() {
            return Err(format!(
                "mask length {} != ids length {}",
                mask.len(),
                r.ids.len()
            ));
        }
        Ok(Self { ids: r.ids, mask })
    }
}

impl From<MaskedIds> for MaskedIdsRepr {
    fn from(m: MaskedIds) -> Self {
        let all = m.mask.iter().all(|&b| b);
        Self {
            ids: m.ids,
            mask: (!all).then_some(m.mask),
        }
    }
}

impl MaskedIds {
    pub fn unpadded(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    /// Ids at unmasked positions.
    pub fn active(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
    }

    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(Vocabulary::PAD);
            self.mask.push(false);
        }
    }
}

/// Sentences of a document plus a sentence-level mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedDocument {
    pub sentences: Vec<MaskedIds>,
    pub mask: Vec<bool>,
}

impl EncodedDocument {
    fn unpadded(sentences: Vec<MaskedIds>) -> Self {
        let mask = vec![true; sentences.len()];
        Self { sentences, mask }
    }

    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn pad(&mut self, sentence_len: usize, sentences: usize) {
        for s in &mut self.sentences {
            s.pad_to(sentence_len);
        }
        while self.sentences.len() < sentences {
            self.sentences.push(MaskedIds {
                ids: vec![Vocabulary::PAD; sentence_len.max(1)],
                mask: vec![false; sentence_len.max(1)],
            });
            self.mask.push(false);
        }
    }
}

/// Model-ready instance: ids, masks and the untruncated reference tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedQuadruple {
    pub id: String,
    pub query: MaskedIds,
    /// Relevant documents concatenated in order.
    pub mega_doc: EncodedDocument,
    pub irrelevant: Vec<EncodedDocument>,
    /// BOS, description ids, EOS.
    pub target: MaskedIds,
    /// Preprocessed description tokens, not truncated; the scoring reference.
    pub reference: Vec<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    /// Relevant sentence count before truncation.
    pub relevant_sentences: usize,
    pub vocab_fingerprint: String,
}

/// Target sizes for [`EncodedQuadruple::pad`]. Padding never truncates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PadSpec {
    pub query: usize,
    pub sentence: usize,
    pub sentences: usize,
    pub irrelevant_sentences: usize,
}

impl EncodedQuadruple {
    pub fn query_type(&self) -> Option<&str> {
        self.meta.get("query_type").map(String::as_str)
    }

    pub fn has_irrelevant(&self) -> bool {
        self.irrelevant.iter().any(|d| d.active_len() > 0)
    }

    /// Copy with PAD entries appended up to the given sizes.
    pub fn pad(&self, spec: PadSpec) -> Self {
        let mut out = self.clone();
        out.query.pad_to(spec.query);
        out.mega_doc.pad(spec.sentence, spec.sentences);
        for doc in &mut out.irrelevant {
            doc.pad(spec.sentence, spec.irrelevant_sentences);
        }
        out
    }

    /// Checks ids against a vocabulary size and masks against lengths.
    pub fn validate(&self, vocab_size: usize) -> Result<(), CorpusError> {
        let bad = |what: &str| CorpusError::Malformed {
            line: 0,
            message: format!("instance {}: {what}", self.id),
        };
        let seqs = std::iter::once(&self.query)
            .chain(&self.mega_doc.sentences)
            .chain(self.irrelevant.iter().flat_map(|d| &d.sentences))
            .chain(std::iter::once(&self.target));
        for s in seqs {
            if s.ids.len() != s.mask.len() {
                return Err(bad("mask length differs from ids"));
            }
            if s.ids.iter().any(|&id| id as usize >= vocab_size) {
                return Err(bad("id outside the vocabulary"));
            }
        }
        for d in std::iter::once(&self.mega_doc).chain(&self.irrelevant) {
            if d.mask.len() != d.sentences.len() {
                return Err(bad("sentence mask length differs from sentence count"));
            }
        }
        if self.query.active_len() == 0 {
            return Err(CorpusError::EmptyQuery {
                id: self.id.clone(),
            });
        }
        if self.mega_doc.active_len() == 0 {
            return Err(bad("no relevant sentences"));
        }
        if self.target.active_len() < 2 {
            return Err(bad("target lacks BOS/EOS"));
        }
        Ok(())
    }
}

fn encode_sentence(tokens: &[String], vocab: &Vocabulary, cap: usize) -> MaskedIds {
    MaskedIds::unpadded(tokens.iter().take(cap).map(|t| vocab.id(t)).collect())
}

fn encode_document<'a>(
    sentences: impl Iterator<Item = &'a Vec<String>>,
    vocab: &Vocabulary,
    caps: &LengthCaps,
) -> EncodedDocument {
    EncodedDocument::unpadded(
        sentences
            .take(caps.sentences)
            .map(|s| encode_sentence(s, vocab, caps.sentence))
            .collect(),
    )
}

/// Maps tokens to ids (OOV to UNK), concatenates the relevant documents
/// into one mega-document, truncates from the tail and wraps the target
/// in BOS/EOS.
pub fn encode_quadruple(
    quad: &Quadruple,
    vocab: &Vocabulary,
    caps: &LengthCaps,
) -> Result<EncodedQuadruple, CorpusError> {
    let query = encode_sentence(&quad.query, vocab, caps.query);
    if query.ids.is_empty() {
        return Err(CorpusError::EmptyQuery {
            id: quad.id.clone(),
        });
    }
    let mega_doc = encode_document(quad.relevant_docs.iter().flatten(), vocab, caps);
    let irrelevant = quad
        .irrelevant_docs
        .iter()
        .map(|d: &Document| encode_document(d.iter(), vocab, caps))
        .filter(|d| !d.sentences.is_empty())
        .collect();
    let mut target = vec![Vocabulary::BOS];
    target.extend(
        quad.description
            .iter()
            .take(caps.description)
            .map(|t| vocab.id(t)),
    );
    target.push(Vocabulary::EOS);
    Ok(EncodedQuadruple {
        id: quad.id.clone(),
        query,
        mega_doc,
        irrelevant,
        target: MaskedIds::unpadded(target),
        reference: quad.description.clone(),
        meta: quad.meta.clone(),
        relevant_sentences: quad.relevant_docs.iter().map(Vec::len).sum(),
        vocab_fingerprint: vocab.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::build_vocabulary;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn quad(relevant: Vec<Vec<&str>>, description: &str) -> Quadruple {
        Quadruple {
            id: "x".into(),
            query: toks("find cats"),
            relevant_docs: relevant
                .into_iter()
                .map(|d| d.into_iter().map(toks).collect())
                .collect(),
            irrelevant_docs: vec![vec![toks("dogs bark")]],
            description: toks(description),
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn oov_maps_to_unk() {
        let q = quad(vec![vec!["cats purr zzz"]], "cats");
        let vocab = Vocabulary::from_tokens(
            Vocabulary::SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(["cats", "purr", "find"].map(String::from))
                .collect(),
        )
        .unwrap();
        let e = encode_quadruple(&q, &vocab, &LengthCaps::default()).unwrap();
        assert_eq!(e.mega_doc.sentences[0].ids, vec![4, 5, Vocabulary::UNK]);
    }

    #[test]
    fn mega_doc_keeps_document_order() {
        let q = quad(
            vec![
                vec!["a one", "a two"],
                vec!["b one", "b two"],
                vec!["c one", "c two"],
            ],
            "d",
        );
        let vocab = build_vocabulary(std::slice::from_ref(&q), 100);
        let e = encode_quadruple(&q, &vocab, &LengthCaps::default()).unwrap();
        assert_eq!(e.mega_doc.sentences.len(), 6);
        let first: Vec<_> = e
            .mega_doc
            .sentences
            .iter()
            .map(|s| vocab.token(s.ids[0]).unwrap())
            .collect();
        assert_eq!(first, ["a", "a", "b", "b", "c", "c"]);
        assert_eq!(e.relevant_sentences, 6);
    }

    #[test]
    fn long_description_truncated_and_wrapped() {
        let desc: Vec<String> = (0..80).map(|i| format!("w{i}")).collect();
        let mut q = quad(vec![vec!["x"]], "");
        q.description = desc;
        let vocab = build_vocabulary(std::slice::from_ref(&q), 1000);
        let e = encode_quadruple(&q, &vocab, &LengthCaps::default()).unwrap();
        assert_eq!(e.target.ids.len(), 62);
        assert_eq!(e.target.ids[0], Vocabulary::BOS);
        assert_eq!(*e.target.ids.last().unwrap(), Vocabulary::EOS);
        assert_eq!(e.reference.len(), 80);
    }

    #[test]
    fn sentence_and_token_caps() {
        let q = quad(vec![vec!["a b c d", "e f", "g"]], "d");
        let vocab = build_vocabulary(std::slice::from_ref(&q), 100);
        let caps = LengthCaps {
            sentence: 2,
            sentences: 2,
            ..LengthCaps::default()
        };
        let e = encode_quadruple(&q, &vocab, &caps).unwrap();
        assert_eq!(e.mega_doc.sentences.len(), 2);
        assert_eq!(vocab.decode(&e.mega_doc.sentences[0].ids), ["a", "b"]);
        assert_eq!(e.relevant_sentences, 3);
    }

    #[test]
    fn empty_query_is_error() {
        let mut q = quad(vec![vec!["x"]], "d");
        q.query.clear();
        let vocab = build_vocabulary(std::slice::from_ref(&q), 10);
        assert!(matches!(
            encode_quadruple(&q, &vocab, &LengthCaps::default()),
            Err(CorpusError::EmptyQuery { .. })
        ));
    }

    #[test]
    fn padding_marks_exactly_padded_positions() {
        let q = quad(vec![vec!["a b", "c"]], "d e");
        let vocab = build_vocabulary(std::slice::from_ref(&q), 10);
        let e = encode_quadruple(&q, &vocab, &LengthCaps::default()).unwrap();
        let p = e.pad(PadSpec {
            query: 5,
            sentence: 4,
            sentences: 4,
            irrelevant_sentences: 3,
        });
        assert_eq!(p.query.ids.len(), 5);
        assert_eq!(p.mega_doc.sentences.len(), 4);
        assert_eq!(p.mega_doc.mask, [true, true, false, false]);
        assert_eq!(p.irrelevant[0].mask, [true, false, false]);
        for s in std::iter::once(&p.query).chain(&p.mega_doc.sentences) {
            for (&id, &m) in s.ids.iter().zip(&s.mask) {
                assert_eq!(m, id != Vocabulary::PAD);
            }
        }
        p.validate(vocab.len()).unwrap();
    }

    #[test]
    fn json_omits_full_masks() {
        let q = quad(vec![vec!["a"]], "d");
        let vocab = build_vocabulary(std::slice::from_ref(&q), 10);
        let e = encode_quadruple(&q, &vocab, &LengthCaps::default()).unwrap();
        let json = serde_json::to_string(&e.query).unwrap();
        assert!(!json.contains("mask"));
        let back: EncodedQuadruple =
            serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
        let padded = e.pad(PadSpec {
            query: 4,
            ..PadSpec::default()
        });
        let back: EncodedQuadruple =
            serde_json::from_str(&serde_json::to_string(&padded).unwrap()).unwrap();
        assert_eq!(back, padded);
    }

    fn token() -> impl Strategy<Value = String> {
        "[a-e][a-z]{0,2}"
    }

    proptest! {
        #[test]
        fn in_vocabulary_ids_decode_to_truncated_tokens(
            query in prop::collection::vec(token(), 1..8),
            sentences in prop::collection::vec(prop::collection::vec(token(), 1..8), 1..6),
            description in prop::collection::vec(token(), 0..10),
            max_vocab in 1usize..40,
        ) {
            let q = Quadruple {
                id: "p".into(),
                query,
                relevant_docs: vec![sentences],
                irrelevant_docs: vec![],
                description,
                meta: BTreeMap::new(),
            };
            let caps = LengthCaps { query: 4, sentence: 5, sentences: 3, description: 6 };
            let vocab = build_vocabulary(std::slice::from_ref(&q), max_vocab);
            let e = encode_quadruple(&q, &vocab, &caps).unwrap();
            let check = |ids: &[u32], tokens: &[String], cap: usize| {
                let truncated: Vec<&String> = tokens.iter().take(cap).collect();
                prop_assert_eq!(ids.len(), truncated.len());
                for (&id, t) in ids.iter().zip(truncated) {
                    if vocab.contains(t) {
                        prop_assert_eq!(vocab.token(id).unwrap(), t.as_str());
                    } else {
                        prop_assert_eq!(id, Vocabulary::UNK);
                    }
                }
                Ok(())
            };
            check(&e.query.ids, &q.query, caps.query)?;
            prop_assert_eq!(e.mega_doc.sentences.len(), q.relevant_docs[0].len().min(caps.sentences));
            for (s, tokens) in e.mega_doc.sentences.iter().zip(&q.relevant_docs[0]) {
                check(&s.ids, tokens, caps.sentence)?;
            }
            let inner = &e.target.ids[1..e.target.ids.len() - 1];
            check(inner, &q.description, caps.description)?;
            prop_assert!(e.validate(vocab.len()).is_ok());
        }

        #[test]
        fn excluded_tokens_never_outnumber_included(
            words in prop::collection::vec(token(), 1..60),
            max_size in 1usize..10,
        ) {
            let q = Quadruple {
                id: "p".into(),
                query: words.clone(),
                relevant_docs: vec![vec![vec!["zq".into()]]],
                irrelevant_docs: vec![],
                description: vec![],
                meta: BTreeMap::new(),
            };
            let vocab = build_vocabulary(std::slice::from_ref(&q), max_size);
            let mut counts = std::collections::HashMap::new();
            for w in words.iter().chain(std::iter::once(&"zq".to_string())) {
                *counts.entry(w.clone()).or_insert(0usize) += 1;
            }
            let included: Vec<usize> = counts.iter().filter(|(w, _)| vocab.contains(w)).map(|(_, &c)| c).collect();
            let excluded: Vec<usize> = counts.iter().filter(|(w, _)| !vocab.contains(w)).map(|(_, &c)| c).collect();
            prop_assert!(vocab.len() <= max_size + 4);
            if let (Some(&min_in), Some(&max_out)) = (included.iter().min(), excluded.iter().max()) {
                prop_assert!(max_out <= min_in);
            }
        }
    }
}
