//! Parameter layout of the full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamId, ParamSet, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} is outside the vocabulary of {vocab} entries")]
    InvalidToken { id: u32, vocab: usize },
    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),
    #[error("embedding file line {line}: {message}")]
    Embedding { line: usize, message: String },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// GRU hidden size H of each encoder direction.
    pub hidden: usize,
    /// Balance between description similarity and irrelevant-document
    /// similarity in the contrast score.
    pub lambda: f64,
    /// Give the irrelevant-document pipeline its own word and sentence
    /// encoders instead of sharing the relevant-document ones.
    pub untie_doc_encoders: bool,
}

impl ModelConfig {
    /// Width of every encoder state (both directions concatenated).
    pub fn state_size(&self) -> usize {
        2 * self.hidden
    }

    /// Decoder hidden size; equal to the encoder state width.
    pub fn decoder_size(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size <= 4 || self.embedding_dim == 0 || self.hidden == 0 {
            return Err(ModelError::Config(format!(
                "sizes must be positive and the vocabulary must hold more than the specials: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ModelError::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// One GRU direction: update, reset and candidate gates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruIds {
    pub input: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiGruIds {
    pub forward: GruIds,
    pub backward: GruIds,
}

/// Handles of every learned tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamIds {
    pub embedding: ParamId,
    pub query_encoder: BiGruIds,
    pub word_encoder: BiGruIds,
    pub sentence_encoder: BiGruIds,
    /// Same handles as the relevant encoders unless untied.
    pub irrelevant_word_encoder: BiGruIds,
    pub irrelevant_sentence_encoder: BiGruIds,
    /// Bilinear query/sentence importance matrix.
    pub encoder_attention: ParamId,
    pub init_query: ParamId,
    pub init_mega: ParamId,
    /// Bilinear query-word/decoder-state matrix.
    pub query_attention: ParamId,
    pub sentence_attention_v: ParamId,
    pub sentence_attention_keys: ParamId,
    pub sentence_attention_query: ParamId,
    pub sentence_attention_state: ParamId,
    pub contrast_description: ParamId,
    pub contrast_irrelevant: ParamId,
    pub decoder: GruIds,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
    pub output_w: ParamId,
    pub output_b: ParamId,
}

struct Builder<'a, T: Real> {
    set: ParamSet<T>,
    make: &'a mut dyn FnMut(&[usize]) -> Tensor<T>,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = (self.make)(shape);
        self.set.insert(name, t)
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruIds {
        let mut gate = |g: &str| {
            (
                self.add(&format!("{prefix}.w_{g}"), &[hidden, input]),
                self.add(&format!("{prefix}.u_{g}"), &[hidden, hidden]),
                self.add(&format!("{prefix}.b_{g}"), &[hidden]),
            )
        };
        let (w_z, u_z, b_z) = gate("z");
        let (w_r, u_r, b_r) = gate("r");
        let (w_h, u_h, b_h) = gate("h");
        GruIds {
            input,
            hidden,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    fn bigru(&mut self, prefix: &str, input: usize, hidden: usize) -> BiGruIds {
        BiGruIds {
            forward: self.gru(&format!("{prefix}.fwd"), input, hidden),
            backward: self.gru(&format!("{prefix}.bwd"), input, hidden),
        }
    }
}

/// Learned tensors plus the handles that name them.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Real> {
    pub config: ModelConfig,
    pub ids: ParamIds,
    pub tensors: ParamSet<T>,
}

impl<T: Real> ModelParams<T> {
    /// Registers every tensor in a fixed order; `make` supplies the values.
    fn build(config: ModelConfig, make: &mut dyn FnMut(&[usize]) -> Tensor<T>) -> Self {
        let (v, e, h) = (config.vocab_size, config.embedding_dim, config.hidden);
        let (d, s) = (config.state_size(), config.decoder_size());
        let mut b = Builder {
            set: ParamSet::new(),
            make,
        };
        let embedding = b.add("embedding", &[v, e]);
        let query_encoder = b.bigru("query_encoder", e, h);
        let word_encoder = b.bigru("word_encoder", e, h);
        let sentence_encoder = b.bigru("sentence_encoder", d, h);
        let (irrelevant_word_encoder, irrelevant_sentence_encoder) = if config.untie_doc_encoders {
            (
                b.bigru("irrelevant_word_encoder", e, h),
                b.bigru("irrelevant_sentence_encoder", d, h),
            )
        } else {
            (word_encoder, sentence_encoder)
        };
        let ids = ParamIds {
            embedding,
            query_encoder,
            word_encoder,
            sentence_encoder,
            irrelevant_word_encoder,
            irrelevant_sentence_encoder,
            encoder_attention: b.add("encoder_attention", &[d, d]),
            init_query: b.add("init.query", &[s, d]),
            init_mega: b.add("init.mega", &[s, d]),
            query_attention: b.add("query_attention", &[d, s]),
            sentence_attention_v: b.add("sentence_attention.v", &[s]),
            sentence_attention_keys: b.add("sentence_attention.keys", &[s, d]),
            sentence_attention_query: b.add("sentence_attention.query", &[s, d]),
            sentence_attention_state: b.add("sentence_attention.state", &[s, s]),
            contrast_description: b.add("contrast.description", &[d, s]),
            contrast_irrelevant: b.add("contrast.irrelevant", &[d, d]),
            decoder: b.gru("decoder", e + 2 * d, s),
            readout_w: b.add("readout.w", &[s, e + s + 2 * d]),
            readout_b: b.add("readout.b", &[s]),
            output_w: b.add("output.w", &[v, s]),
            output_b: b.add("output.b", &[v]),
        };
        Self {
            config,
            ids,
            tensors: b.set,
        }
    }

    /// Every entry drawn uniformly from `[-init_range, init_range]`.
    pub fn init(config: ModelConfig, init_range: f64, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(config, &mut |shape| {
            Tensor::uniform(shape, init_range, &mut rng)
        }))
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self::build(config, &mut |shape| Tensor::zeros(shape)))
    }

    /// Fills a fresh layout from named tensors, which must match the
    /// layout's names, order and shapes exactly.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        let mut out = Self::zeros(config)?;
        if tensors.len() != out.tensors.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, got {}",
                out.tensors.len(),
                tensors.len()
            )));
        }
        let ids: Vec<ParamId> = out.tensors.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(tensors) {
            let slot = out.tensors.get(id);
            if out.tensors.name(id) != name || slot.shape() != t.shape() {
                return Err(ModelError::Layout(format!(
                    "expected {} {:?}, got {name} {:?}",
                    out.tensors.name(id),
                    slot.shape(),
                    t.shape()
                )));
            }
            *out.tensors.get_mut(id) = t;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            ids: self.ids.clone(),
            tensors: self.tensors.cast(),
        }
    }
}
