//! Maximum-likelihood training with Adam, global-norm clipping and
//! gradient accumulation over instances.

mod checkpoint;
mod config;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, EncodedQuadruple, Vocabulary};
use crate::decoder::teacher_force;
use crate::model::{ModelError, ModelParams};
use crate::tensor::{clip_global_norm, Adam, Gradients, Graph, Real, TensorError, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("non-finite loss at step {step} on instance {instance}")]
    NonFinite { step: u64, instance: String },
    #[error("empty training split")]
    EmptyTrainingSet,
    #[error("instance {id} was encoded with vocabulary {found}, model uses {expected}")]
    VocabularyMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

/// Mean negative log-likelihood of `(distribution, target)` pairs.
pub fn nll_loss<T: Real>(g: &mut Graph<'_, T>, steps: &[(Var, u32)]) -> Result<Var, ModelError> {
    let terms = steps
        .iter()
        .map(|&(dist, target)| g.nll(dist, target as usize))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(g.mean(&terms)?)
}

/// Teacher-forced mean per-token NLL of one instance.
pub fn instance_loss<T: Real>(
    g: &mut Graph<'_, T>,
    params: &ModelParams<T>,
    quad: &EncodedQuadruple,
) -> Result<Var, ModelError> {
    let steps: Vec<(Var, u32)> = teacher_force(g, params, quad)?
        .into_iter()
        .map(|(s, t)| (s.distribution, t))
        .collect();
    nll_loss(g, &steps)
}

/// Summed NLL and target-token count over `data`, accumulated in order.
pub fn corpus_nll<T: Real>(
    params: &ModelParams<T>,
    data: &[EncodedQuadruple],
) -> Result<(f64, usize), ModelError> {
    let parts = data
        .par_iter()
        .map(|q| {
            let mut g = Graph::new(&params.tensors);
            let loss = instance_loss(&mut g, params, q)?;
            let tokens = q.target.active_len() - 1;
            Ok((g.scalar(loss).as_f64() * tokens as f64, tokens))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(parts
        .into_iter()
        .fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b)))
}

/// Mean per-token NLL over `data`.
pub fn mean_token_nll<T: Real>(
    params: &ModelParams<T>,
    data: &[EncodedQuadruple],
) -> Result<f64, ModelError> {
    let (sum, tokens) = corpus_nll(params, data)?;
    Ok(if tokens == 0 {
        0.0
    } else {
        sum / tokens as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    /// Mean of per-instance losses seen during the epoch.
    pub train_loss: f64,
    /// Mean per-token NLL on the validation split after the epoch.
    pub valid_loss: Option<f64>,
    pub grad_norm: f64,
}

/// Training state. Everything that influences later epochs lives here and
/// is captured by [`Trainer::checkpoint`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
    pub best_loss: Option<f64>,
    pub stale_epochs: usize,
    pub history: Vec<EpochRecord>,
    best: Option<Box<Checkpoint>>,
}

impl Trainer {
    /// Fresh parameters and optimizer. Parameters are drawn from a stream
    /// seeded by `config.seed`; batching uses a separate stream.
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self, TrainError> {
        config.validate()?;
        let params = ModelParams::init(
            config.model_config(vocab.len()),
            config.init_range,
            config.seed,
        )?;
        let adam = Adam::new(config.adam(), &params.tensors);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            vocab,
            params,
            adam,
            rng,
            epoch: 0,
            step: 0,
            best_loss: None,
            stale_epochs: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            config: ckpt.config,
            vocab: ckpt.vocab,
            params: ckpt.params,
            adam: ckpt.adam,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
            step: ckpt.step,
            best_loss: ckpt.best_loss,
            stale_epochs: ckpt.stale_epochs,
            history: ckpt.history,
            best: None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            step: self.step,
            best_loss: self.best_loss,
            stale_epochs: self.stale_epochs,
            history: self.history.clone(),
        }
    }

    /// Snapshot taken at the epoch with the lowest selection loss, if any
    /// epoch improved on it since this trainer was created.
    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_deref()
    }

    /// Rejects instances encoded with another vocabulary or holding ids
    /// outside it.
    pub fn check_data(
        &self,
        train: &[EncodedQuadruple],
        valid: &[EncodedQuadruple],
    ) -> Result<(), TrainError> {
        let expected = self.vocab.fingerprint();
        for q in train.iter().chain(valid) {
            if !q.vocab_fingerprint.is_empty() && q.vocab_fingerprint != expected {
                return Err(TrainError::VocabularyMismatch {
                    id: q.id.clone(),
                    expected,
                    found: q.vocab_fingerprint.clone(),
                });
            }
            q.validate(self.vocab.len())?;
        }
        Ok(())
    }

    /// One pass over `train` in a freshly shuffled order. Each batch
    /// accumulates per-instance gradients, averages them, clips the global
    /// norm and applies one Adam step.
    pub fn train_epoch(&mut self, train: &[EncodedQuadruple]) -> Result<(f64, f64), TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut grads = Gradients::zeros_like(&self.params.tensors);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            grads.zero();
            for &i in batch {
                let quad = &train[i];
                let mut g = Graph::new(&self.params.tensors);
                let loss = instance_loss(&mut g, &self.params, quad)?;
                let value = g.scalar(loss).as_f64();
                if !value.is_finite() {
                    return Err(TrainError::NonFinite {
                        step: self.step,
                        instance: quad.id.clone(),
                    });
                }
                loss_sum += value;
                g.backward_into(loss, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f32);
            if !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    step: self.step,
                    instance: train[batch[0]].id.clone(),
                });
            }
            norm_sum += clip_global_norm(&mut grads, self.config.clip_norm);
            self.adam.step(&mut self.params.tensors, &grads)?;
            self.step += 1;
            batches += 1;
        }
        Ok((loss_sum / train.len() as f64, norm_sum / batches as f64))
    }

    /// Runs one more epoch unless `config.epochs` epochs have already run
    /// or early stopping has triggered. Selection uses validation loss, or
    /// training loss when `valid` is empty.
    pub fn next_epoch(
        &mut self,
        train: &[EncodedQuadruple],
        valid: &[EncodedQuadruple],
    ) -> Result<Option<EpochOutcome>, TrainError> {
        if self.finished() {
            return Ok(None);
        }
        let (train_loss, grad_norm) = self.train_epoch(train)?;
        self.epoch += 1;
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(mean_token_nll(&self.params, valid)?)
        };
        let record = EpochRecord {
            epoch: self.epoch,
            steps: self.step,
            train_loss,
            valid_loss,
            grad_norm,
        };
        self.history.push(record.clone());
        let selection = valid_loss.unwrap_or(train_loss);
        let improved = self.best_loss.is_none_or(|b| selection < b);
        if improved {
            self.best_loss = Some(selection);
            self.stale_epochs = 0;
            self.best = Some(Box::new(self.checkpoint()));
        } else {
            self.stale_epochs += 1;
        }
        Ok(Some(EpochOutcome { record, improved }))
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
            || (self.config.patience > 0 && self.stale_epochs >= self.config.patience)
    }

    /// Calls [`Trainer::next_epoch`] until training is finished.
    pub fn run(
        &mut self,
        train: &[EncodedQuadruple],
        valid: &[EncodedQuadruple],
        mut on_epoch: impl FnMut(&EpochOutcome),
    ) -> Result<(), TrainError> {
        self.check_data(train, valid)?;
        while let Some(outcome) = self.next_epoch(train, valid)? {
            on_epoch(&outcome);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub record: EpochRecord,
    /// The epoch set a new best selection loss.
    pub improved: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, encode_quadruple, LengthCaps};
    use crate::synthetic::{synthetic_corpus, SyntheticSpec};
    use crate::tensor::{ParamSet, Tensor};

    fn data(n: usize) -> (Vocabulary, Vec<EncodedQuadruple>) {
        let spec = SyntheticSpec {
            instances: n,
            words: 20,
            ..SyntheticSpec::default()
        };
        let corpus = synthetic_corpus(&spec, 5);
        let vocab = build_vocabulary(&corpus, 100);
        let encoded = corpus
            .iter()
            .map(|q| encode_quadruple(q, &vocab, &LengthCaps::default()).unwrap())
            .collect();
        (vocab, encoded)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden: 4,
            embedding_dim: 6,
            batch_size: 3,
            epochs: 3,
            lr: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn nll_examples() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        let uniform = g.constant(Tensor::vector(vec![0.25; 4]));
        let loss = nll_loss(&mut g, &[(uniform, 1), (uniform, 3)]).unwrap();
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-15);
        let sure = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let loss = nll_loss(&mut g, &[(sure, 1)]).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
        let d = g.constant(Tensor::vector(vec![0.5, 0.25, 0.25]));
        let loss = nll_loss(&mut g, &[(d, 0), (d, 2)]).unwrap();
        assert!((g.scalar(loss) - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (vocab, train) = data(7);
        let mut a = Trainer::new(small_config(), vocab.clone()).unwrap();
        let mut b = Trainer::new(small_config(), vocab).unwrap();
        a.run(&train, &[], |_| {}).unwrap();
        b.run(&train, &[], |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.tensors, b.params.tensors);
        assert_eq!(a.step, 9);
    }

    #[test]
    fn one_step_moves_every_parameter_with_gradient() {
        let (vocab, train) = data(2);
        let mut cfg = small_config();
        cfg.batch_size = 16;
        let mut t = Trainer::new(cfg, vocab).unwrap();
        let before = t.params.tensors.clone();
        let mut g = Graph::new(&t.params.tensors);
        let mut grads = Gradients::zeros_like(&t.params.tensors);
        for q in &train {
            let loss = instance_loss(&mut g, &t.params, q).unwrap();
            g.backward_into(loss, &mut grads).unwrap();
        }
        drop(g);
        t.train_epoch(&train).unwrap();
        for ((id, _, old), new) in before.iter().zip(t.params.tensors.iter().map(|x| x.2)) {
            for ((o, n), gr) in old.data().iter().zip(new.data()).zip(grads.get(id).data()) {
                if *gr != 0.0 {
                    assert_ne!(o, n);
                }
            }
        }
    }

    #[test]
    fn selected_loss_is_minimum_of_history() {
        let (vocab, all) = data(9);
        let mut t = Trainer::new(small_config(), vocab).unwrap();
        t.run(&all[..6], &all[6..], |_| {}).unwrap();
        let min = t
            .history
            .iter()
            .filter_map(|r| r.valid_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(t.best_loss, Some(min));
        assert_eq!(t.best().unwrap().best_loss, Some(min));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (vocab, all) = data(8);
        let mut cfg = small_config();
        cfg.epochs = 4;
        let mut full = Trainer::new(cfg.clone(), vocab.clone()).unwrap();
        full.run(&all[..6], &all[6..], |_| {}).unwrap();

        cfg.epochs = 2;
        let mut first = Trainer::new(cfg, vocab).unwrap();
        first.run(&all[..6], &all[6..], |_| {}).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap());
        resumed.config.epochs = 4;
        resumed.run(&all[..6], &all[6..], |_| {}).unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.params.tensors, full.params.tensors);
    }

    #[test]
    fn foreign_vocabulary_rejected() {
        let (vocab, mut train) = data(2);
        train[0].vocab_fingerprint = "0000".into();
        let mut t = Trainer::new(small_config(), vocab).unwrap();
        assert!(matches!(
            t.run(&train, &[], |_| {}),
            Err(TrainError::VocabularyMismatch { .. })
        ));
    }

    #[test]
    fn early_stopping_halts_after_patience() {
        let (vocab, all) = data(6);
        let mut cfg = small_config();
        cfg.lr = 0.0;
        cfg.epochs = 50;
        cfg.patience = 2;
        let mut t = Trainer::new(cfg, vocab).unwrap();
        t.run(&all[..4], &all[4..], |_| {}).unwrap();
        // the first epoch sets the best; two stale epochs follow
        assert_eq!(t.history.len(), 3);
    }
}
