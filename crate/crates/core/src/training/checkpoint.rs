//! Binary checkpoint: `CGEN`, u32 LE format version, u64 LE metadata
//! length, JSON metadata, then little-endian f32 blobs for parameters,
//! Adam first moments and Adam second moments, each in manifest order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Adam, Tensor};

use super::{EpochRecord, TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGEN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
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
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    model: ModelConfig,
    vocab: Vocabulary,
    manifest: Vec<ManifestEntry>,
    epoch: usize,
    step: u64,
    adam_steps: u64,
    rng: ChaCha8Rng,
    best_loss: Option<f64>,
    stale_epochs: usize,
    history: Vec<EpochRecord>,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn tensors(
        &mut self,
        manifest: &[ManifestEntry],
        what: &str,
    ) -> Result<Vec<Tensor<f32>>, TrainError> {
        manifest
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let raw = self.take(n * 4, what)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect();
                Tensor::new(e.shape.clone(), data).map_err(|e| corrupt(e.to_string()))
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self
            .params
            .tensors
            .iter()
            .map(|(_, name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let meta = Metadata {
            config: self.config.clone(),
            model: self.params.config,
            vocab: self.vocab.clone(),
            manifest,
            epoch: self.epoch,
            step: self.step,
            adam_steps: self.adam.step_count(),
            rng: self.rng.clone(),
            best_loss: self.best_loss,
            stale_epochs: self.stale_epochs,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 12 * self.params.tensors.numel());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let blobs = self
            .params
            .tensors
            .iter()
            .map(|(_, _, t)| t)
            .chain(self.adam.first_moments())
            .chain(self.adam.second_moments());
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8, "metadata length")?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| corrupt("metadata length overflows"))?;
        let meta: Metadata = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| corrupt(format!("metadata: {e}")))?;
        let params = r.tensors(&meta.manifest, "parameters")?;
        let first = r.tensors(&meta.manifest, "first moments")?;
        let second = r.tensors(&meta.manifest, "second moments")?;
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if meta.model.vocab_size != meta.vocab.len() {
            return Err(corrupt(
                "model vocabulary size differs from stored vocabulary",
            ));
        }
        let named = meta
            .manifest
            .into_iter()
            .map(|e| e.name)
            .zip(params)
            .collect();
        let params = ModelParams::from_tensors(meta.model, named)?;
        let adam = Adam::from_state(
            meta.config.adam(),
            &params.tensors,
            first,
            second,
            meta.adam_steps,
        )?;
        Ok(Self {
            config: meta.config,
            vocab: meta.vocab,
            params,
            adam,
            rng: meta.rng,
            epoch: meta.epoch,
            step: meta.step,
            best_loss: meta.best_loss,
            stale_epochs: meta.stale_epochs,
            history: meta.history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, encode_quadruple, LengthCaps};
    use crate::synthetic::{synthetic_corpus, SyntheticSpec};
    use crate::training::Trainer;

    fn trained() -> Checkpoint {
        let corpus = synthetic_corpus(&SyntheticSpec::default(), 2);
        let vocab = build_vocabulary(&corpus, 100);
        let data: Vec<_> = corpus
            .iter()
            .map(|q| encode_quadruple(q, &vocab, &LengthCaps::default()).unwrap())
            .collect();
        let config = TrainConfig {
            hidden: 3,
            embedding_dim: 4,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(config, vocab).unwrap();
        t.run(&data, &[], |_| {}).unwrap();
        t.checkpoint()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = trained();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.tensors, ckpt.params.tensors);
        assert_eq!(back.adam, ckpt.adam);
        assert_eq!(back.rng, ckpt.rng);
    }

    #[test]
    fn damaged_files_rejected() {
        let bytes = trained().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut version = bytes.clone();
        version[4] = 9;
        let err = Checkpoint::from_bytes(&version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = trained();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), ckpt.to_bytes());
        assert!(Checkpoint::load(dir.path().join("missing")).is_err());
    }
}
