//! Contrastive generation of query intent descriptions.
//!
//! Given a query, the documents judged relevant to it and the documents
//! judged irrelevant, the model writes a short natural-language
//! description of what the query is looking for. Relevant documents are
//! concatenated into one mega-document and encoded hierarchically; the
//! decoder attends to the query, to the relevant sentences, and scores
//! each relevant sentence against the irrelevant ones so that content the
//! two sets share is down-weighted.

pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use corpus::{
    encode_quadruple, load_corpus, preprocess_text, split_corpus, CorpusError, EncodedQuadruple,
    LengthCaps, Quadruple, Vocabulary,
};
pub use decoder::{generate, Generation, Strategy};
pub use evaluation::{
    evaluate_corpus, rouge_l, rouge_n, EvalError, RougeReport, RougeScores, SliceKey,
};
pub use model::{ModelConfig, ModelError, ModelParams};
pub use tensor::{Graph, ParamSet, Real, Tensor, TensorError, Var};
pub use training::{Checkpoint, TrainConfig, TrainError, Trainer};
