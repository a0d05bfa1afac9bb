//! Finite-difference checks of every differentiable operation, from the
//! tensor primitives up to the full training loss on a tiny instance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EncodedDocument, EncodedQuadruple, MaskedIds, Vocabulary};
use crate::decoder::{contrast_scores, decode_step, irrelevant_similarity, prepare, DecoderMemory};
use crate::encoders::{bigru, encode, encode_irrelevant, encode_query, encode_relevant};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::{grad_check, GradCheckReport, Graph, ParamSet, Tensor, Var};
use crate::training::instance_loss;

/// Central-difference step used by the suite.
pub const EPS: f64 = 1e-6;
/// A check passes when its maximum relative error is below this.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.report.max_error < TOLERANCE
    }
}

type Objective = Box<dyn for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var, ModelError>>;

/// `Σ out ∘ w` for a fixed random `w`, so every output element matters.
fn project(g: &mut Graph<'_, f64>, out: Var, w: &Tensor<f64>) -> Result<Var, ModelError> {
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn primitive_objectives(seed: u64) -> (ParamSet<f64>, Vec<(&'static str, Objective)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let a = p.insert("a", Tensor::uniform(&[3, 4], 1.0, &mut rng));
    let m = p.insert("m", Tensor::uniform(&[3, 4], 1.0, &mut rng));
    let b = p.insert("b", Tensor::uniform(&[4, 2], 1.0, &mut rng));
    let v = p.insert("v", Tensor::uniform(&[4], 1.0, &mut rng));
    let u = p.insert("u", Tensor::uniform(&[4], 1.0, &mut rng));
    let w = p.insert("w", Tensor::uniform(&[3], 1.0, &mut rng));
    let table = p.insert("table", Tensor::uniform(&[5, 3], 1.0, &mut rng));
    let mut weights = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut rng);
    let (w34, w32, w43, w4, w7, w24, w44, w3) = (
        weights(&[3, 4]),
        weights(&[3, 2]),
        weights(&[4, 3]),
        weights(&[4]),
        weights(&[7]),
        weights(&[2, 4]),
        weights(&[4, 4]),
        weights(&[3]),
    );
    macro_rules! obj {
        ($name:literal, $w:expr, |$g:ident| $body:expr) => {{
            let w = $w.clone();
            let f: Objective = Box::new(move |$g: &mut Graph<'_, f64>| {
                let out = $body;
                project($g, out, &w)
            });
            ($name, f)
        }};
    }
    let list = vec![
        obj!("matmul_matrix_vector", w3, |g| {
            let (x, y) = (g.param(a), g.param(v));
            g.matmul(x, y)?
        }),
        obj!("matmul_matrix_matrix", w32, |g| {
            let (x, y) = (g.param(a), g.param(b));
            g.matmul(x, y)?
        }),
        obj!("add", w34, |g| {
            let (x, y) = (g.param(a), g.param(m));
            g.add(x, y)?
        }),
        obj!("add_row_broadcast", w34, |g| {
            let (x, y) = (g.param(a), g.param(v));
            g.add(x, y)?
        }),
        obj!("sub", w34, |g| {
            let (x, y) = (g.param(a), g.param(m));
            g.sub(x, y)?
        }),
        obj!("mul", w34, |g| {
            let (x, y) = (g.param(a), g.param(m));
            g.mul(x, y)?
        }),
        obj!("scale", w34, |g| {
            let x = g.param(a);
            g.scale(x, -0.7)
        }),
        obj!("tanh", w34, |g| {
            let x = g.param(a);
            g.tanh(x)
        }),
        obj!("sigmoid", w34, |g| {
            let x = g.param(a);
            g.sigmoid(x)
        }),
        obj!("concat", w7, |g| {
            let (x, y) = (g.param(v), g.param(w));
            g.concat(&[x, y])?
        }),
        obj!("stack", w24, |g| {
            let (x, y) = (g.param(v), g.param(u));
            g.stack(&[x, y])?
        }),
        obj!("stack_matrices", w44, |g| {
            let (x, y) = (g.param(a), g.param(u));
            g.stack(&[x, y])?
        }),
        obj!("transpose", w43, |g| {
            let x = g.param(a);
            g.transpose(x)?
        }),
        obj!("softmax", w4, |g| {
            let x = g.param(v);
            g.softmax(x)?
        }),
        obj!("masked_softmax", w34, |g| {
            let x = g.param(a);
            g.masked_softmax(x, &[true, false, true, true])?
        }),
        obj!("embedding", w3, |g| {
            let t = g.param(table);
            g.embedding(t, 2)?
        }),
        obj!("sum", Tensor::scalar(1.3), |g| {
            let x = g.param(a);
            g.sum(x)
        }),
        obj!("dot", Tensor::scalar(0.8), |g| {
            let (x, y) = (g.param(v), g.param(u));
            g.dot(x, y)?
        }),
        obj!("max_rows", w3, |g| {
            let x = g.param(a);
            g.max_over_axis(x, 1)?
        }),
        obj!("max_columns", w4, |g| {
            let x = g.param(a);
            g.max_over_axis(x, 0)?
        }),
        obj!("nll", Tensor::scalar(1.0), |g| {
            let x = g.param(v);
            let d = g.softmax(x)?;
            g.nll(d, 1)?
        }),
        obj!("mean", Tensor::scalar(1.0), |g| {
            let (x, y, z) = (g.param(v), g.param(u), g.param(w));
            let d = g.dot(x, y)?;
            let s = g.sum(z);
            g.mean(&[d, s])?
        }),
    ];
    (p, list)
}

/// Checks every tensor primitive on random inputs.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheckEntry>, ModelError> {
    let (params, objectives) = primitive_objectives(seed);
    objectives
        .into_iter()
        .map(|(name, f)| {
            Ok(GradCheckEntry {
                name,
                report: grad_check(&params, EPS, f)?,
            })
        })
        .collect()
}

/// The tiny reference instance: 3 query words, 2 relevant sentences, one
/// irrelevant document of 2 sentences, H = 4, 20-entry vocabulary.
pub fn tiny_instance(seed: u64) -> (ModelParams<f64>, EncodedQuadruple) {
    let config = ModelConfig {
        vocab_size: 20,
        embedding_dim: 5,
        hidden: 4,
        lambda: 0.5,
        untie_doc_encoders: false,
    };
    let params = ModelParams::init(config, 0.5, seed).expect("valid tiny config");
    let doc = |sentences: &[&[u32]]| EncodedDocument {
        sentences: sentences
            .iter()
            .map(|s| MaskedIds::unpadded(s.to_vec()))
            .collect(),
        mask: vec![true; sentences.len()],
    };
    let quad = EncodedQuadruple {
        id: "tiny".into(),
        query: MaskedIds::unpadded(vec![4, 5, 6]),
        mega_doc: doc(&[&[7, 8, 9], &[10, 11]]),
        irrelevant: vec![doc(&[&[12, 13], &[14, 15, 16]])],
        target: MaskedIds::unpadded(vec![Vocabulary::BOS, 17, 18, 19, Vocabulary::EOS]),
        reference: vec!["a".into(), "b".into(), "c".into()],
        meta: Default::default(),
        relevant_sentences: 2,
        vocab_fingerprint: String::new(),
    };
    (params, quad)
}

/// Checks each model component and the full loss on [`tiny_instance`],
/// over every parameter coordinate.
pub fn model_checks(seed: u64) -> Result<Vec<GradCheckEntry>, ModelError> {
    let (params, quad) = tiny_instance(seed);
    let p = &params;
    let q = &quad;
    let d = p.config.state_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut weights = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut rng);
    let mut entries = Vec::new();
    let mut check =
        |name: &'static str, f: &dyn for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var, ModelError>| {
            grad_check(&p.tensors, EPS, f)
                .map(|report| entries.push(GradCheckEntry { name, report }))
        };

    let w = weights(&[4]);
    check("gru_step", &|g| {
        let table = g.param(p.ids.embedding);
        let x1 = g.embedding(table, 4)?;
        let x2 = g.embedding(table, 5)?;
        let h0 = g.zeros(p.config.hidden);
        let h1 = p.ids.word_encoder.forward.step(g, x1, h0)?;
        let h2 = p.ids.word_encoder.forward.step(g, x2, h1)?;
        project(g, h2, &w)
    })?;
    let w = weights(&[3, d]);
    check("bigru", &|g| {
        let table = g.param(p.ids.embedding);
        let xs = [4, 9, 13]
            .iter()
            .map(|&t| g.embedding(table, t))
            .collect::<Result<Vec<_>, _>>()?;
        let out = bigru(g, &p.ids.word_encoder, &xs, &[true; 3])?;
        let states = g.stack(&out.states)?;
        project(g, states, &w)
    })?;
    let w = weights(&[d]);
    check("encode_query", &|g| {
        let (_, repr) = encode_query(g, &p.ids, &q.query)?;
        project(g, repr, &w)
    })?;
    let (w1, w2) = (weights(&[d]), weights(&[2]));
    check("encode_relevant", &|g| {
        let (_, xq) = encode_query(g, &p.ids, &q.query)?;
        let r = encode_relevant(g, &p.ids, &q.mega_doc, xq)?;
        let a = project(g, r.summary, &w1)?;
        let b = project(g, r.importance, &w2)?;
        Ok(g.add(a, b)?)
    })?;
    let w = weights(&[2, d]);
    check("encode_irrelevant", &|g| {
        let states = encode_irrelevant(g, &p.ids, &q.irrelevant)?;
        project(g, states[0], &w)
    })?;
    let w = weights(&[2]);
    check("irrelevant_similarity", &|g| {
        let enc = encode(g, &p.ids, q)?;
        let m = irrelevant_similarity(
            g,
            &p.ids,
            enc.mega_states,
            &enc.irrelevant_states,
            &enc.irrelevant_masks,
        )?
        .expect("tiny instance has irrelevant sentences");
        project(g, m, &w)
    })?;
    let w = weights(&[2]);
    check("contrast_scores", &|g| {
        let (memory, h0): (DecoderMemory, Var) = prepare(g, p, q)?;
        let (_, beta) = contrast_scores(g, &p.ids, &memory, h0, p.config.lambda)?;
        project(g, beta, &w)
    })?;
    let (wd, ws) = (weights(&[p.config.vocab_size]), weights(&[d]));
    check("decode_step", &|g| {
        let (memory, h0) = prepare(g, p, q)?;
        let s1 = decode_step(g, p, &memory, Vocabulary::BOS, h0)?;
        let s2 = decode_step(g, p, &memory, 17, s1.state)?;
        let a = project(g, s2.distribution, &wd)?;
        let b = project(g, s2.state, &ws)?;
        Ok(g.add(a, b)?)
    })?;
    check("full_loss", &|g| instance_loss(g, p, q))?;
    Ok(entries)
}

/// Primitive checks followed by model checks.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckEntry>, ModelError> {
    let mut out = primitive_checks(seed)?;
    out.extend(model_checks(seed)?);
    Ok(out)
}
