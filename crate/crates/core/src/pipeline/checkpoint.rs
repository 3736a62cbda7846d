//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "MEMAECKP"
//! version     u32
//! header_len  u64
//! header      JSON: configs, counters, optimizer scalars, RNG state, tensor index
//! params      f32 × Σ rows·cols   (tensor index order, row-major)
//! adam_m      f32 × Σ rows·cols
//! adam_v      f32 × Σ rows·cols
//! ```

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::config::{ModelConfig, TrainConfig};
use crate::pipeline::model::MaskedAutoencoder;
use crate::pipeline::optim::AdamW;

pub const MAGIC: &[u8; 8] = b"MEMAECKP";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position (u128) in decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        self.try_restore().expect("valid RNG state")
    }

    fn try_restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Corrupt("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Everything needed to resume training or to score with a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MaskedAutoencoder<f32>,
    pub train_config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub optimizer: AdamW<f32>,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    decay: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    step: usize,
    optimizer: OptimizerHeader,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.store();
        let header = Header {
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            step: self.step,
            optimizer: OptimizerHeader {
                t: self.optimizer.t,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                weight_decay: self.optimizer.weight_decay,
            },
            rng: self.rng.clone(),
            tensors: store
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: [p.value.nrows(), p.value.ncols()],
                    decay: p.decay,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let scalars = store.num_scalars();
        let mut out = Vec::with_capacity(20 + json.len() + 12 * scalars);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let params = store.iter().map(|p| &p.value);
        for section in [
            params.collect::<Vec<_>>(),
            self.optimizer.m.iter().collect(),
            self.optimizer.v.iter().collect(),
        ] {
            for arr in section {
                for v in arr.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("missing checkpoint header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start])
            .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
        let scalars: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
        let expected = scalars
            .checked_mul(12)
            .ok_or_else(|| Error::Corrupt("tensor index overflows".into()))?;
        let body = &bytes[body_start..];
        if body.len() != expected {
            return Err(Error::Corrupt(format!(
                "tensor data has {} bytes, index requires {expected}",
                body.len()
            )));
        }
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut read_section = || -> Vec<Array2<f32>> {
            header
                .tensors
                .iter()
                .map(|t| {
                    let data: Vec<f32> = floats.by_ref().take(t.shape[0] * t.shape[1]).collect();
                    Array2::from_shape_vec((t.shape[0], t.shape[1]), data).expect("sized by index")
                })
                .collect()
        };
        let params = read_section();
        let m = read_section();
        let v = read_section();

        let mut store = ParamStore::new();
        for (t, value) in header.tensors.iter().zip(params) {
            store.add(t.name.clone(), value, t.decay);
        }
        let model = MaskedAutoencoder::from_store(header.model_config, store)
            .map_err(|e| Error::Corrupt(format!("parameters do not match the stored config: {e}")))?;
        let rng = header.rng.try_restore().map(|_| header.rng)?;
        Ok(Self {
            model,
            train_config: header.train_config,
            epoch: header.epoch,
            step: header.step,
            optimizer: AdamW {
                beta1: header.optimizer.beta1,
                beta2: header.optimizer.beta2,
                eps: header.optimizer.eps,
                weight_decay: header.optimizer.weight_decay,
                t: header.optimizer.t,
                m,
                v,
            },
            rng,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
