//! Query, relevant mega-document and irrelevant-document encoders.
//!
//! All three are bidirectional GRUs. Documents are encoded hierarchically:
//! a word-level pass turns each sentence into the concatenated final
//! states of both directions, then a sentence-level pass runs over those
//! sentence embeddings. The relevant mega-document is additionally
//! summarized by a query-aware softmax over its sentence states.

use std::io::BufRead;

use crate::corpus::{EncodedDocument, EncodedQuadruple, MaskedIds, Vocabulary};
use crate::model::{BiGruIds, GruIds, ModelConfig, ModelError, ModelParams, ParamIds};
use crate::tensor::{Graph, ParamId, Real, TensorError, Var};

impl GruIds {
    /// One recurrence step:
    /// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
    /// `h~ = tanh(W_h x + U_h (r ∘ h) + b_h)`, `h' = (1 - z) ∘ h~ + z ∘ h`.
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: Var) -> Result<Var, TensorError> {
        let gate = |g: &mut Graph<'_, T>,
                    w: ParamId,
                    u: ParamId,
                    b: ParamId,
                    hv: Var|
         -> Result<Var, TensorError> {
            let (w, u, b) = (g.param(w), g.param(u), g.param(b));
            let wx = g.matmul(w, x)?;
            let uh = g.matmul(u, hv)?;
            let s = g.add(wx, uh)?;
            g.add(s, b)
        };
        let z = gate(g, self.w_z, self.u_z, self.b_z, h)?;
        let z = g.sigmoid(z);
        let r = gate(g, self.w_r, self.u_r, self.b_r, h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = gate(g, self.w_h, self.u_h, self.b_h, rh)?;
        let cand = g.tanh(cand);
        // (1 - z) ∘ h~ + z ∘ h  ==  h~ + z ∘ (h - h~)
        let diff = g.sub(h, cand)?;
        let gated = g.mul(z, diff)?;
        g.add(cand, gated)
    }
}

/// Per-position states and final summary of a bidirectional pass.
#[derive(Debug, Clone)]
pub struct BiGruOutput {
    /// One `2H` state per input position; zero vectors at masked positions.
    pub states: Vec<Var>,
    /// Last forward state concatenated with last backward state.
    pub final_state: Var,
}

/// Runs both directions over the unmasked positions of `inputs`, starting
/// from zero states. Masked positions are skipped entirely.
pub fn bigru<T: Real>(
    g: &mut Graph<'_, T>,
    params: &BiGruIds,
    inputs: &[Var],
    mask: &[bool],
) -> Result<BiGruOutput, ModelError> {
    if mask.len() != inputs.len() {
        return Err(TensorError::Shape {
            op: "bigru",
            lhs: vec![inputs.len()],
            rhs: vec![mask.len()],
        }
        .into());
    }
    let active: Vec<usize> = (0..inputs.len()).filter(|&i| mask[i]).collect();
    if active.is_empty() {
        return Err(ModelError::EmptySequence("bigru"));
    }
    let hidden = params.forward.hidden;
    let zero = g.zeros(hidden);
    let mut forward = vec![None; inputs.len()];
    let mut h = zero;
    for &i in &active {
        h = params.forward.step(g, inputs[i], h)?;
        forward[i] = Some(h);
    }
    let last_forward = h;
    let mut backward = vec![None; inputs.len()];
    h = zero;
    for &i in active.iter().rev() {
        h = params.backward.step(g, inputs[i], h)?;
        backward[i] = Some(h);
    }
    let last_backward = h;
    let padding = g.zeros(2 * hidden);
    let mut states = Vec::with_capacity(inputs.len());
    for (f, b) in forward.into_iter().zip(backward) {
        states.push(match (f, b) {
            (Some(f), Some(b)) => g.concat(&[f, b])?,
            _ => padding,
        });
    }
    let final_state = g.concat(&[last_forward, last_backward])?;
    Ok(BiGruOutput {
        states,
        final_state,
    })
}

fn embed<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    tokens: &[u32],
) -> Result<Vec<Var>, ModelError> {
    let table = g.param(ids.embedding);
    let vocab = g.shape(table)[0];
    tokens
        .iter()
        .map(|&t| {
            if t as usize >= vocab {
                return Err(ModelError::InvalidToken { id: t, vocab });
            }
            Ok(g.embedding(table, t as usize)?)
        })
        .collect()
}

/// Query word states (`[C, 2H]`, padded rows zero) and the query vector.
pub fn encode_query<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    query: &MaskedIds,
) -> Result<(Var, Var), ModelError> {
    let inputs = embed(g, ids, &query.ids)?;
    let out = bigru(g, &ids.query_encoder, &inputs, &query.mask)?;
    let states = g.stack(&out.states)?;
    Ok((states, out.final_state))
}

/// Hierarchical encoding of one document: word pass per sentence, then a
/// sentence pass. Returns sentence states as a `[T, 2H]` matrix.
fn encode_document<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    word: &BiGruIds,
    sentence: &BiGruIds,
    doc: &EncodedDocument,
) -> Result<Var, ModelError> {
    if doc.sentences.is_empty() {
        return Err(ModelError::EmptySequence("document"));
    }
    let width = 2 * word.forward.hidden;
    let mut embeddings = Vec::with_capacity(doc.sentences.len());
    for (s, &keep) in doc.sentences.iter().zip(&doc.mask) {
        if keep {
            let inputs = embed(g, ids, &s.ids)?;
            embeddings.push(bigru(g, word, &inputs, &s.mask)?.final_state);
        } else {
            embeddings.push(g.zeros(width));
        }
    }
    let out = bigru(g, sentence, &embeddings, &doc.mask)?;
    Ok(g.stack(&out.states)?)
}

/// Relevant mega-document encoding with query-aware aggregation.
#[derive(Debug, Clone, Copy)]
pub struct RelevantEncoding {
    /// `[U, 2H]` sentence states.
    pub states: Var,
    /// Importance distribution over sentences.
    pub importance: Var,
    /// Importance-weighted sum of the sentence states.
    pub summary: Var,
}

/// Encodes the mega-document, scores every sentence state `h_u` against
/// the query vector through the bilinear form `x_q · Q · h_u`, normalizes
/// over unmasked sentences and averages the states under those weights.
pub fn encode_relevant<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    mega_doc: &EncodedDocument,
    query_repr: Var,
) -> Result<RelevantEncoding, ModelError> {
    let states = encode_document(g, ids, &ids.word_encoder, &ids.sentence_encoder, mega_doc)?;
    let importance = sentence_importance(g, ids, states, query_repr, &mega_doc.mask)?;
    let states_t = g.transpose(states)?;
    let summary = g.matmul(states_t, importance)?;
    Ok(RelevantEncoding {
        states,
        importance,
        summary,
    })
}

/// `softmax_u(x_q · Q · h_u)` over unmasked rows of `states`.
pub fn sentence_importance<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    states: Var,
    query_repr: Var,
    mask: &[bool],
) -> Result<Var, ModelError> {
    let q = g.param(ids.encoder_attention);
    let qt = g.transpose(q)?;
    let key = g.matmul(qt, query_repr)?;
    let scores = g.matmul(states, key)?;
    Ok(g.masked_softmax(scores, mask)?)
}

/// Sentence states of each irrelevant document, encoded independently.
pub fn encode_irrelevant<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    docs: &[EncodedDocument],
) -> Result<Vec<Var>, ModelError> {
    docs.iter()
        .filter(|d| d.active_len() > 0)
        .map(|d| {
            encode_document(
                g,
                ids,
                &ids.irrelevant_word_encoder,
                &ids.irrelevant_sentence_encoder,
                d,
            )
        })
        .collect()
}

/// Everything the decoder reads from the inputs of one instance.
#[derive(Debug, Clone)]
pub struct EncoderOutputs {
    /// `[C, 2H]` query word states.
    pub query_states: Var,
    pub query_mask: Vec<bool>,
    pub query_repr: Var,
    /// `[U, 2H]` mega-document sentence states.
    pub mega_states: Var,
    /// `[2H, U]`, kept to form weighted sums without re-transposing.
    pub mega_states_t: Var,
    pub sentence_mask: Vec<bool>,
    pub encoder_attention: Var,
    pub mega_repr: Var,
    /// `[T_n, 2H]` sentence states per irrelevant document.
    pub irrelevant_states: Vec<Var>,
    pub irrelevant_masks: Vec<Vec<bool>>,
}

impl EncoderOutputs {
    pub fn has_irrelevant(&self) -> bool {
        !self.irrelevant_states.is_empty()
    }
}

pub fn encode<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    quad: &EncodedQuadruple,
) -> Result<EncoderOutputs, ModelError> {
    let (query_states, query_repr) = encode_query(g, ids, &quad.query)?;
    let relevant = encode_relevant(g, ids, &quad.mega_doc, query_repr)?;
    let mega_states_t = g.transpose(relevant.states)?;
    let irrelevant_states = encode_irrelevant(g, ids, &quad.irrelevant)?;
    let irrelevant_masks = quad
        .irrelevant
        .iter()
        .filter(|d| d.active_len() > 0)
        .map(|d| d.mask.clone())
        .collect();
    Ok(EncoderOutputs {
        query_states,
        query_mask: quad.query.mask.clone(),
        query_repr,
        mega_states: relevant.states,
        mega_states_t,
        sentence_mask: quad.mega_doc.mask.clone(),
        encoder_attention: relevant.importance,
        mega_repr: relevant.summary,
        irrelevant_states,
        irrelevant_masks,
    })
}

/// Overwrites embedding rows from a text file of `token v1 … vD` lines.
/// Tokens missing from the vocabulary are skipped. Returns how many rows
/// were replaced.
pub fn load_embeddings<T: Real, R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    params: &mut ModelParams<T>,
) -> Result<usize, ModelError> {
    let config: ModelConfig = params.config;
    let dim = config.embedding_dim;
    let table = params.tensors.get_mut(params.ids.embedding);
    let mut loaded = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ModelError::Embedding {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(str::parse::<f64>)
            .collect::<Result<_, _>>()
            .map_err(|e| ModelError::Embedding {
                line: line_no,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            // word2vec text files start with a "count dim" header line
            if line_no == 1 && values.len() == 1 && token.parse::<usize>().is_ok() {
                continue;
            }
            return Err(ModelError::Embedding {
                line: line_no,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if !vocab.contains(token) || Vocabulary::is_special(vocab.id(token)) {
            continue;
        }
        let row = vocab.id(token) as usize;
        let dst = &mut table.data_mut()[row * dim..(row + 1) * dim];
        for (d, v) in dst.iter_mut().zip(values) {
            *d = T::of(v);
        }
        loaded += 1;
    }
    Ok(loaded)
}
