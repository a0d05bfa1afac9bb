use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{LengthCaps, VocabOptions};
use crate::model::ModelConfig;
use crate::tensor::AdamConfig;

use super::TrainError;

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub lambda: f64,
    pub hidden: usize,
    pub embedding_dim: usize,
    /// Parameters start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    /// Vocabulary size excluding the special tokens.
    pub vocab_max: usize,
    pub include_descriptions: bool,
    pub untie_doc_encoders: bool,
    pub epochs: usize,
    /// Stop after this many epochs without improvement; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub max_query_len: usize,
    pub max_sentence_len: usize,
    pub max_sentences: usize,
    pub max_description_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let caps = LengthCaps::default();
        let vocab = VocabOptions::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 16,
            clip_norm: 5.0,
            lambda: 0.5,
            hidden: 256,
            embedding_dim: 300,
            init_range: 0.1,
            vocab_max: vocab.max_size,
            include_descriptions: vocab.include_descriptions,
            untie_doc_encoders: false,
            epochs: 20,
            patience: 5,
            seed: 1,
            max_query_len: caps.query,
            max_sentence_len: caps.sentence,
            max_sentences: caps.sentences,
            max_description_len: caps.description,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| TrainError::Config(format!("{key} = {value:?}: {e}")))
}

macro_rules! keys {
    ($($name:ident),* $(,)?) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    other => return Err(TrainError::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// `key = value` lines in declaration order.
            pub fn to_kv(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($name), self.$name).expect("writing to a String");)*
                out
            }
        }
    };
}

keys!(
    lr,
    beta1,
    beta2,
    adam_eps,
    batch_size,
    clip_norm,
    lambda,
    hidden,
    embedding_dim,
    init_range,
    vocab_max,
    include_descriptions,
    untie_doc_encoders,
    epochs,
    patience,
    seed,
    max_query_len,
    max_sentence_len,
    max_sentences,
    max_description_len,
);

impl TrainConfig {
    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", i + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("embedding_dim", self.embedding_dim),
            ("vocab_max", self.vocab_max),
            ("max_query_len", self.max_query_len),
            ("max_sentence_len", self.max_sentence_len),
            ("max_sentences", self.max_sentences),
            ("max_description_len", self.max_description_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("init_range", self.init_range),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::Config("lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embedding_dim: self.embedding_dim,
            hidden: self.hidden,
            lambda: self.lambda,
            untie_doc_encoders: self.untie_doc_encoders,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn caps(&self) -> LengthCaps {
        LengthCaps {
            query: self.max_query_len,
            sentence: self.max_sentence_len,
            sentences: self.max_sentences,
            description: self.max_description_len,
        }
    }

    pub fn vocab_options(&self) -> VocabOptions {
        VocabOptions {
            max_size: self.vocab_max,
            include_descriptions: self.include_descriptions,
        }
    }
}
