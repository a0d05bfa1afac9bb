//! Attention-based GRU decoder with contrastive sentence scoring.
//!
//! Every step reads the previous decoder state `h` and computes:
//!
//! * query attention `α_q = softmax_c(h_c · W1 · h)` and context `c_q`;
//! * relevant-sentence attention `α_r = softmax_u(vᵀ tanh(W2 h_u + W3 c_q + W4 h))`;
//! * contrast weights `β = softmax_u(λ · h_u·W5·h − (1−λ) · m_u)`, where
//!   `m_u` is the largest normalized similarity of sentence `u` to any
//!   irrelevant sentence (0 when there are none);
//! * document context `c_d = Σ_u β_u α_r,u h_u`, deliberately not
//!   renormalized.
//!
//! The GRU then consumes `[emb(prev); c_q; c_d]`, and the output
//! distribution is a softmax over a linear map of
//! `tanh(W [emb(prev); h'; c_q; c_d] + b)`.

use std::cmp::Ordering;
use std::io::Write;

use crate::corpus::{EncodedQuadruple, Vocabulary};
use crate::encoders::{encode, EncoderOutputs};
use crate::model::{ModelError, ModelParams, ParamIds};
use crate::tensor::{Graph, Real, Var};

/// Encoder outputs plus the step-independent parts of the attentions.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    pub enc: EncoderOutputs,
    /// `[U, S]` rows `W2 h_u`.
    pub sentence_keys: Var,
    /// `[U]` max over irrelevant sentences of the normalized similarity;
    /// `None` without irrelevant sentences.
    pub irrelevant_max: Option<Var>,
}

impl DecoderMemory {
    pub fn new<T: Real>(
        g: &mut Graph<'_, T>,
        ids: &ParamIds,
        enc: EncoderOutputs,
    ) -> Result<Self, ModelError> {
        let w2 = g.param(ids.sentence_attention_keys);
        let w2t = g.transpose(w2)?;
        let sentence_keys = g.matmul(enc.mega_states, w2t)?;
        let irrelevant_max = irrelevant_similarity(
            g,
            ids,
            enc.mega_states,
            &enc.irrelevant_states,
            &enc.irrelevant_masks,
        )?;
        Ok(Self {
            enc,
            sentence_keys,
            irrelevant_max,
        })
    }
}

/// `h0 = W_q x_q + W_r x_r`.
pub fn init_state<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    query_repr: Var,
    mega_repr: Var,
) -> Result<Var, ModelError> {
    let wq = g.param(ids.init_query);
    let wr = g.param(ids.init_mega);
    let a = g.matmul(wq, query_repr)?;
    let b = g.matmul(wr, mega_repr)?;
    Ok(g.add(a, b)?)
}

/// Query attention and the resulting query context.
pub fn query_context<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    enc: &EncoderOutputs,
    h_prev: Var,
) -> Result<(Var, Var), ModelError> {
    let w1 = g.param(ids.query_attention);
    let key = g.matmul(w1, h_prev)?;
    let scores = g.matmul(enc.query_states, key)?;
    let alpha = g.masked_softmax(scores, &enc.query_mask)?;
    let states_t = g.transpose(enc.query_states)?;
    let context = g.matmul(states_t, alpha)?;
    Ok((alpha, context))
}

/// Additive attention over relevant sentences, conditioned on the query
/// context and the previous decoder state.
pub fn relevant_attention<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    memory: &DecoderMemory,
    query_ctx: Var,
    h_prev: Var,
) -> Result<Var, ModelError> {
    let w3 = g.param(ids.sentence_attention_query);
    let w4 = g.param(ids.sentence_attention_state);
    let v = g.param(ids.sentence_attention_v);
    let a = g.matmul(w3, query_ctx)?;
    let b = g.matmul(w4, h_prev)?;
    let shift = g.add(a, b)?;
    let pre = g.add(memory.sentence_keys, shift)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, v)?;
    Ok(g.masked_softmax(scores, &memory.enc.sentence_mask)?)
}

/// For every relevant sentence `u`: normalize `tanh(h_u · W6 · h_t)` over
/// all unpadded irrelevant sentences `t` of all documents, and keep the
/// maximum. Returns `None` when no irrelevant sentence exists.
pub fn irrelevant_similarity<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    mega_states: Var,
    irrelevant_states: &[Var],
    irrelevant_masks: &[Vec<bool>],
) -> Result<Option<Var>, ModelError> {
    let mask: Vec<bool> = irrelevant_masks.iter().flatten().copied().collect();
    if irrelevant_states.is_empty() || !mask.iter().any(|&m| m) {
        return Ok(None);
    }
    let all = g.stack(irrelevant_states)?;
    if g.shape(all)[0] != mask.len() {
        return Err(ModelError::Layout(format!(
            "{} irrelevant states but {} mask entries",
            g.shape(all)[0],
            mask.len()
        )));
    }
    let w6 = g.param(ids.contrast_irrelevant);
    let left = g.matmul(mega_states, w6)?;
    let all_t = g.transpose(all)?;
    let scores = g.matmul(left, all_t)?;
    let scores = g.tanh(scores);
    let sim = g.masked_softmax(scores, &mask)?;
    Ok(Some(g.max_over_axis(sim, 1)?))
}

/// Unnormalized contrast scores and their masked softmax.
pub fn contrast_scores<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &ParamIds,
    memory: &DecoderMemory,
    h_prev: Var,
    lambda: f64,
) -> Result<(Var, Var), ModelError> {
    let w5 = g.param(ids.contrast_description);
    let key = g.matmul(w5, h_prev)?;
    let sim = g.matmul(memory.enc.mega_states, key)?;
    let mut scores = g.scale(sim, lambda);
    if let Some(m) = memory.irrelevant_max {
        let penalty = g.scale(m, 1.0 - lambda);
        scores = g.sub(scores, penalty)?;
    }
    let beta = g.masked_softmax(scores, &memory.enc.sentence_mask)?;
    Ok((scores, beta))
}

/// `Σ_u β_u α_r,u h_u`.
pub fn doc_context<T: Real>(
    g: &mut Graph<'_, T>,
    enc: &EncoderOutputs,
    relevant: Var,
    contrast: Var,
) -> Result<Var, ModelError> {
    let weights = g.mul(contrast, relevant)?;
    Ok(g.matmul(enc.mega_states_t, weights)?)
}

/// Everything produced by one decoding step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: Var,
    /// Distribution over the vocabulary.
    pub distribution: Var,
    pub query_attention: Var,
    pub relevant_attention: Var,
    pub contrast_scores: Var,
    pub contrast: Var,
}

pub fn decode_step<T: Real>(
    g: &mut Graph<'_, T>,
    params: &ModelParams<T>,
    memory: &DecoderMemory,
    prev_token: u32,
    h_prev: Var,
) -> Result<StepOutput, ModelError> {
    let ids = &params.ids;
    let vocab = params.config.vocab_size;
    if prev_token as usize >= vocab {
        return Err(ModelError::InvalidToken {
            id: prev_token,
            vocab,
        });
    }
    let table = g.param(ids.embedding);
    let emb = g.embedding(table, prev_token as usize)?;
    let (query_attention, cq) = query_context(g, ids, &memory.enc, h_prev)?;
    let relevant = relevant_attention(g, ids, memory, cq, h_prev)?;
    let (contrast_scores, contrast) =
        contrast_scores(g, ids, memory, h_prev, params.config.lambda)?;
    let cd = doc_context(g, &memory.enc, relevant, contrast)?;
    let input = g.concat(&[emb, cq, cd])?;
    let state = ids.decoder.step(g, input, h_prev)?;
    let features = g.concat(&[emb, state, cq, cd])?;
    let rw = g.param(ids.readout_w);
    let rb = g.param(ids.readout_b);
    let r = g.matmul(rw, features)?;
    let r = g.add(r, rb)?;
    let r = g.tanh(r);
    let ow = g.param(ids.output_w);
    let ob = g.param(ids.output_b);
    let logits = g.matmul(ow, r)?;
    let logits = g.add(logits, ob)?;
    let distribution = g.softmax(logits)?;
    Ok(StepOutput {
        state,
        distribution,
        query_attention,
        relevant_attention: relevant,
        contrast_scores,
        contrast,
    })
}

/// Encodes `quad` and builds its decoder memory and initial state.
pub fn prepare<T: Real>(
    g: &mut Graph<'_, T>,
    params: &ModelParams<T>,
    quad: &EncodedQuadruple,
) -> Result<(DecoderMemory, Var), ModelError> {
    let enc = encode(g, &params.ids, quad)?;
    let h0 = init_state(g, &params.ids, enc.query_repr, enc.mega_repr)?;
    let memory = DecoderMemory::new(g, &params.ids, enc)?;
    Ok((memory, h0))
}

/// Runs the decoder over the gold target, feeding target token `z - 1`
/// at step `z`. Step `z` predicts target token `z`; only steps whose
/// target is unmasked are returned, paired with that target id.
pub fn teacher_force<T: Real>(
    g: &mut Graph<'_, T>,
    params: &ModelParams<T>,
    quad: &EncodedQuadruple,
) -> Result<Vec<(StepOutput, u32)>, ModelError> {
    let (memory, mut h) = prepare(g, params, quad)?;
    let target = &quad.target;
    let len = target.mask.iter().take_while(|&&m| m).count();
    if len < 2 {
        return Err(ModelError::EmptySequence("target"));
    }
    let mut out = Vec::with_capacity(len - 1);
    for z in 1..len {
        let step = decode_step(g, params, &memory, target.ids[z - 1], h)?;
        h = step.state;
        out.push((step, target.ids[z]));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

/// Attention weights at one generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    pub query: Vec<f64>,
    pub relevant: Vec<f64>,
    pub contrast: Vec<f64>,
    /// `contrast * relevant`, the weights that form the document context.
    pub product: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids without BOS or EOS.
    pub tokens: Vec<u32>,
    pub attention: Vec<StepAttention>,
    /// Sum of log-probabilities of the emitted ids, EOS included if emitted.
    pub log_prob: f64,
    pub finished: bool,
}

impl Generation {
    /// Writes the attention records as TSV:
    /// `step  sentence_index  alpha_r  beta  product`.
    pub fn write_attention_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step\tsentence_index\talpha_r\tbeta\tproduct")?;
        for (z, a) in self.attention.iter().enumerate() {
            for u in 0..a.relevant.len() {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    z + 1,
                    u,
                    a.relevant[u],
                    a.contrast[u],
                    a.product[u]
                )?;
            }
        }
        Ok(())
    }
}

fn record<T: Real>(g: &Graph<'_, T>, step: &StepOutput) -> StepAttention {
    let read = |v: Var| g.value(v).iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let relevant = read(step.relevant_attention);
    let contrast = read(step.contrast);
    let product = relevant.iter().zip(&contrast).map(|(a, b)| a * b).collect();
    StepAttention {
        query: read(step.query_attention),
        relevant,
        contrast,
        product,
    }
}

/// Candidate order: higher cumulative log-prob, then higher step
/// probability, then lower token id.
fn rank(a: (f64, f64, u32), b: (f64, f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| b.1.total_cmp(&a.1))
        .then_with(|| a.2.cmp(&b.2))
}

/// Indices of the `k` most probable entries, ties to lower id.
fn top_k<T: Real>(dist: &[T], k: usize) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = dist
        .iter()
        .enumerate()
        .map(|(i, p)| (i as u32, p.as_f64()))
        .collect();
    let k = k.min(all.len());
    let cmp = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0));
    if k < all.len() {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all
}

fn ln(p: f64) -> f64 {
    p.max(crate::tensor::NLL_FLOOR).ln()
}

/// Decodes from BOS for at most `max_len` steps. Stops when EOS is
/// chosen. Greedy takes the most probable id at each step, ties to the
/// lowest id. Beam search keeps the `width` best partial hypotheses and
/// returns the finished one with the highest log-probability per emitted
/// id (EOS counted).
pub fn generate<T: Real>(
    params: &ModelParams<T>,
    quad: &EncodedQuadruple,
    max_len: usize,
    strategy: Strategy,
) -> Result<Generation, ModelError> {
    if max_len == 0 {
        return Err(ModelError::Config("max_len must be at least 1".into()));
    }
    let width = match strategy {
        Strategy::Greedy => 1,
        Strategy::Beam(0) => {
            return Err(ModelError::Config("beam width must be at least 1".into()))
        }
        Strategy::Beam(w) => w,
    };
    let mut g = Graph::new(&params.tensors);
    let (memory, h0) = prepare(&mut g, params, quad)?;

    struct Hyp {
        last: u32,
        state: Var,
        gen: Generation,
    }
    let mut live = vec![Hyp {
        last: Vocabulary::BOS,
        state: h0,
        gen: Generation {
            tokens: Vec::new(),
            attention: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
    }];
    let mut done: Vec<Generation> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let step = decode_step(&mut g, params, &memory, hyp.last, hyp.state)?;
            for (id, p) in top_k(g.value(step.distribution), width) {
                candidates.push((h, step, id, p, hyp.gen.log_prob + ln(p)));
            }
        }
        candidates.sort_by(|a, b| rank((a.4, a.3, a.2), (b.4, b.3, b.2)));
        candidates.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (h, step, id, _, log_prob) in candidates {
            let mut gen = live[h].gen.clone();
            gen.attention.push(record(&g, &step));
            gen.log_prob = log_prob;
            if id == Vocabulary::EOS {
                gen.finished = true;
                done.push(gen);
            } else {
                gen.tokens.push(id);
                next.push(Hyp {
                    last: id,
                    state: step.state,
                    gen,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    done.extend(live.into_iter().map(|h| h.gen));
    let score = |gen: &Generation| gen.log_prob / gen.attention.len().max(1) as f64;
    let best = done
        .into_iter()
        .reduce(|best, c| if score(&c) > score(&best) { c } else { best })
        .expect("at least one hypothesis survives a step");
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EncodedDocument, MaskedIds};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn params(hidden: usize, lambda: f64) -> ModelParams<f64> {
        ModelParams::init(
            ModelConfig {
                vocab_size: 15,
                embedding_dim: 3,
                hidden,
                lambda,
                untie_doc_encoders: false,
            },
            0.5,
            4,
        )
        .unwrap()
    }

    fn doc(sentences: &[&[u32]]) -> EncodedDocument {
        EncodedDocument {
            sentences: sentences
                .iter()
                .map(|s| MaskedIds::unpadded(s.to_vec()))
                .collect(),
            mask: vec![true; sentences.len()],
        }
    }

    fn quad(irrelevant: Vec<EncodedDocument>) -> EncodedQuadruple {
        EncodedQuadruple {
            id: "q".into(),
            query: MaskedIds::unpadded(vec![4, 5]),
            mega_doc: doc(&[&[6, 7], &[8], &[9, 10, 11]]),
            irrelevant,
            target: MaskedIds::unpadded(vec![2, 12, 13, 3]),
            reference: vec!["x".into(), "y".into()],
            meta: Default::default(),
            relevant_sentences: 3,
            vocab_fingerprint: String::new(),
        }
    }

    /// Memory over hand-set `[U, 2]` sentence states (hidden 1).
    fn hand_memory(g: &mut Graph<'_, f64>, p: &ModelParams<f64>, states: &[f64]) -> DecoderMemory {
        let u = states.len() / 2;
        let mega = g.constant(Tensor::matrix(u, 2, states.to_vec()).unwrap());
        let mega_t = g.transpose(mega).unwrap();
        let q = g.constant(Tensor::matrix(1, 2, vec![0.2, -0.3]).unwrap());
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let gamma = g.constant(Tensor::vector(vec![1.0 / u as f64; u]));
        let enc = EncoderOutputs {
            query_states: q,
            query_mask: vec![true],
            query_repr: x,
            mega_states: mega,
            mega_states_t: mega_t,
            sentence_mask: vec![true; u],
            encoder_attention: gamma,
            mega_repr: x,
            irrelevant_states: vec![],
            irrelevant_masks: vec![],
        };
        DecoderMemory::new(g, &p.ids, enc).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    fn softmax(s: &[f64]) -> Vec<f64> {
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    }

    #[test]
    fn init_state_hand_arithmetic() {
        let mut p = params(1, 0.5);
        *p.tensors.get_mut(p.ids.init_query) =
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        *p.tensors.get_mut(p.ids.init_mega) =
            Tensor::matrix(2, 2, vec![0.5, 0.0, -1.0, 1.0]).unwrap();
        let mut g = Graph::new(&p.tensors);
        let xq = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let xr = g.constant(Tensor::vector(vec![2.0, 3.0]));
        let h0 = init_state(&mut g, &p.ids, xq, xr).unwrap();
        // [1-2, 3-4] + [1, -2+3]
        close(g.value(h0), &[0.0, 0.0]);
        let xq2 = g.constant(Tensor::vector(vec![0.5, 0.25]));
        let h0 = init_state(&mut g, &p.ids, xq2, xr).unwrap();
        close(g.value(h0), &[1.0 + 1.0, 1.5 + 1.0 + 1.0]);
    }

    #[test]
    fn query_attention_hand_case() {
        let mut p = params(1, 0.5);
        *p.tensors.get_mut(p.ids.query_attention) =
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, -1.0]).unwrap();
        let mut g = Graph::new(&p.tensors);
        let mut memory = hand_memory(&mut g, &p, &[1.0, 0.0]);
        memory.enc.query_states =
            g.constant(Tensor::matrix(2, 2, vec![0.3, 0.7, -0.2, 0.4]).unwrap());
        memory.enc.query_mask = vec![true, true];
        let h = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let (alpha, ctx) = query_context(&mut g, &p.ids, &memory.enc, h).unwrap();
        // W1 h = [1, 0.5 - 2] = [1, -1.5]
        let s = [0.3 - 0.7 * 1.5, -0.2 - 0.4 * 1.5];
        let a = softmax(&s);
        close(g.value(alpha), &a);
        close(
            g.value(ctx),
            &[a[0] * 0.3 + a[1] * -0.2, a[0] * 0.7 + a[1] * 0.4],
        );
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let mut p = params(1, 0.5);
        p.tensors.get_mut(p.ids.query_attention).fill(0.0);
        p.tensors.get_mut(p.ids.sentence_attention_v).fill(0.0);
        let mut g = Graph::new(&p.tensors);
        let mut memory = hand_memory(&mut g, &p, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        memory.enc.query_states =
            g.constant(Tensor::matrix(2, 2, vec![0.3, 0.7, -0.2, 0.4]).unwrap());
        memory.enc.query_mask = vec![true, true];
        let h = g.constant(Tensor::vector(vec![0.4, -0.9]));
        let (alpha, cq) = query_context(&mut g, &p.ids, &memory.enc, h).unwrap();
        close(g.value(alpha), &[0.5, 0.5]);
        let ar = relevant_attention(&mut g, &p.ids, &memory, cq, h).unwrap();
        close(g.value(ar), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn relevant_attention_hand_case() {
        let mut p = params(1, 0.5);
        *p.tensors.get_mut(p.ids.sentence_attention_v) = Tensor::vector(vec![1.0, -2.0]);
        *p.tensors.get_mut(p.ids.sentence_attention_keys) =
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *p.tensors.get_mut(p.ids.sentence_attention_query) =
            Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        *p.tensors.get_mut(p.ids.sentence_attention_state) =
            Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let states = [0.2, -0.1, 0.9, 0.3, -0.5, 0.6];
        let mut g = Graph::new(&p.tensors);
        let memory = hand_memory(&mut g, &p, &states);
        let cq = g.constant(Tensor::vector(vec![0.4, 0.2]));
        let h = g.constant(Tensor::vector(vec![-0.3, 0.1]));
        let got = relevant_attention(&mut g, &p.ids, &memory, cq, h).unwrap();
        // shift = 0.5 cq + swap(h) = [0.2 + 0.1, 0.1 - 0.3]
        let shift = [0.3, -0.2];
        let scores: Vec<f64> = states
            .chunks(2)
            .map(|hu| (hu[0] + shift[0]).tanh() - 2.0 * (hu[1] + shift[1]).tanh())
            .collect();
        close(g.value(got), &softmax(&scores));
    }

    #[test]
    fn singleton_relevant_set() {
        let p = params(1, 0.5);
        let mut g = Graph::new(&p.tensors);
        let memory = hand_memory(&mut g, &p, &[0.3, -0.8]);
        let h = g.constant(Tensor::vector(vec![0.4, -0.9]));
        let (_, cq) = query_context(&mut g, &p.ids, &memory.enc, h).unwrap();
        let ar = relevant_attention(&mut g, &p.ids, &memory, cq, h).unwrap();
        let (_, beta) = contrast_scores(&mut g, &p.ids, &memory, h, 0.5).unwrap();
        assert_eq!(g.value(ar), &[1.0]);
        let cd = doc_context(&mut g, &memory.enc, ar, beta).unwrap();
        close(g.value(cd), &[0.3, -0.8]);
    }

    #[test]
    fn contrast_without_irrelevant_is_scaled_bilinear() {
        let mut p = params(1, 0.5);
        *p.tensors.get_mut(p.ids.contrast_description) =
            Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, -1.0]).unwrap();
        let mut g = Graph::new(&p.tensors);
        let memory = hand_memory(&mut g, &p, &[0.2, 0.4, -0.6, 1.0]);
        let h = g.constant(Tensor::vector(vec![0.5, 0.25]));
        let (hat, beta) = contrast_scores(&mut g, &p.ids, &memory, h, 0.5).unwrap();
        // W5 h = [1.0, -0.25]
        let s = [0.5 * (0.2 - 0.1), 0.5 * (-0.6 - 0.25)];
        close(g.value(hat), &s);
        close(g.value(beta), &softmax(&s));
    }

    #[test]
    fn single_irrelevant_sentence_has_unit_similarity() {
        let p = params(1, 0.5);
        let mut g = Graph::new(&p.tensors);
        let mega = g.constant(Tensor::matrix(2, 2, vec![0.2, 0.4, -0.6, 1.0]).unwrap());
        let irr = g.constant(Tensor::matrix(2, 2, vec![0.7, -0.1, 0.0, 0.0]).unwrap());
        let m = irrelevant_similarity(&mut g, &p.ids, mega, &[irr], &[vec![true, false]])
            .unwrap()
            .unwrap();
        assert_eq!(g.value(m), &[1.0, 1.0]);
        assert!(irrelevant_similarity(&mut g, &p.ids, mega, &[], &[])
            .unwrap()
            .is_none());
    }

    #[test]
    fn irrelevant_similarity_hand_case() {
        let mut p = params(1, 0.5);
        *p.tensors.get_mut(p.ids.contrast_irrelevant) =
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let mut g = Graph::new(&p.tensors);
        let mega = g.constant(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
        let d1 = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let d2 = g.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 0.4, 0.4]).unwrap());
        let m = irrelevant_similarity(
            &mut g,
            &p.ids,
            mega,
            &[d1, d2],
            &[vec![true], vec![true, true]],
        )
        .unwrap()
        .unwrap();
        // h W6 = [0.5, -1.0]
        let s = softmax(&[0.5f64.tanh(), (-1.0f64).tanh(), (0.2f64 - 0.4).tanh()]);
        close(g.value(m), &[s.iter().cloned().fold(0.0, f64::max)]);
    }

    #[test]
    fn doc_context_hand_case() {
        let p = params(1, 0.5);
        let mut g = Graph::new(&p.tensors);
        let memory = hand_memory(&mut g, &p, &[1.0, 2.0, 3.0, -1.0]);
        let ar = g.constant(Tensor::vector(vec![0.25, 0.75]));
        let beta = g.constant(Tensor::vector(vec![0.6, 0.4]));
        let cd = doc_context(&mut g, &memory.enc, ar, beta).unwrap();
        close(g.value(cd), &[0.15 + 0.9, 0.3 - 0.3]);
    }

    #[test]
    fn step_distribution_is_normalized_and_deterministic() {
        let p = params(2, 0.5);
        let q = quad(vec![doc(&[&[6, 14], &[13]])]);
        let mut g = Graph::new(&p.tensors);
        let (memory, h0) = prepare(&mut g, &p, &q).unwrap();
        let a = decode_step(&mut g, &p, &memory, Vocabulary::BOS, h0).unwrap();
        let b = decode_step(&mut g, &p, &memory, Vocabulary::BOS, h0).unwrap();
        let d = g.value(a.distribution);
        assert_eq!(d.len(), 15);
        assert!(d.iter().all(|&x| x > 0.0));
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g.value(a.distribution), g.value(b.distribution));
        assert!(matches!(
            decode_step(&mut g, &p, &memory, 99, h0),
            Err(ModelError::InvalidToken { .. })
        ));
    }

    #[test]
    fn generation_respects_cap_and_beam_one_matches_greedy() {
        let p = params(2, 0.5);
        let q = quad(vec![]);
        let one = generate(&p, &q, 1, Strategy::Greedy).unwrap();
        assert!(one.tokens.len() <= 1);
        let greedy = generate(&p, &q, 6, Strategy::Greedy).unwrap();
        let beam = generate(&p, &q, 6, Strategy::Beam(1)).unwrap();
        assert_eq!(greedy, beam);
        assert_eq!(
            greedy.attention.len(),
            greedy.tokens.len() + usize::from(greedy.finished)
        );
        let wide = generate(&p, &q, 6, Strategy::Beam(4)).unwrap();
        assert!(wide.tokens.len() <= 6);
        assert!(generate(&p, &q, 0, Strategy::Greedy).is_err());
    }

    #[test]
    fn teacher_forcing_predicts_each_following_token() {
        let p = params(2, 0.5);
        let q = quad(vec![]);
        let mut g = Graph::new(&p.tensors);
        let steps = teacher_force(&mut g, &p, &q).unwrap();
        let targets: Vec<u32> = steps.iter().map(|s| s.1).collect();
        assert_eq!(targets, [12, 13, 3]);
    }

    #[test]
    fn attention_tsv_layout() {
        let p = params(2, 0.5);
        let gen = generate(&p, &quad(vec![]), 2, Strategy::Greedy).unwrap();
        let mut buf = Vec::new();
        gen.write_attention_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step\tsentence_index\talpha_r\tbeta\tproduct");
        assert_eq!(lines.len(), 1 + 3 * gen.attention.len());
        assert!(lines[1].starts_with("1\t0\t"));
    }
}
