use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::autodiff::{RngState, Tensor};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::training::{Adam, AdamSlot, Trainer};
use crate::transformer::Model;

const MAGIC: &str = "THOR-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in 8-byte values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    t: u64,
    m_offset: usize,
    v_offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: Vec<MomentEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    rng: RngState,
    best_bleu: Option<f64>,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
    optimizer: OptimizerEntry,
}

/// A resumable snapshot of a training run.
///
/// On disk: a magic line `THOR-CHECKPOINT v1`, a line holding the byte length
/// of the JSON header, the header itself and a newline, then the parameters
/// and optimizer moments as little-endian `f64` values at the offsets the
/// header lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    /// Best validation BLEU seen so far, if validated.
    pub best_bleu: Option<f64>,
    /// Parameters in creation order.
    pub params: Vec<(String, Tensor)>,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, config: &RunConfig, best_bleu: Option<f64>) -> Self {
        Self {
            config: config.clone(),
            step: trainer.step,
            rng: trainer.rng.state(),
            best_bleu,
            params: trainer
                .model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            adam: trainer.adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<f64> = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(t.data());
        }
        let mut moments = Vec::new();
        for (i, slot) in self.adam.slots.iter().enumerate() {
            let Some(slot) = slot else { continue };
            let name = self
                .params
                .get(i)
                .map(|(n, _)| n.clone())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer slot {i} has no parameter")))?;
            let m_offset = payload.len();
            payload.extend_from_slice(&slot.m);
            let v_offset = payload.len();
            payload.extend_from_slice(&slot.v);
            moments.push(MomentEntry {
                name,
                t: slot.t,
                m_offset,
                v_offset,
                len: slot.m.len(),
            });
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            step: self.step,
            rng: self.rng,
            best_bleu: self.best_bleu,
            config: self.config.clone(),
            tensors,
            optimizer: OptimizerEntry {
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                moments,
            },
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = format!("{MAGIC} v{CHECKPOINT_VERSION}\n{}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        out.push(b'\n');
        out.reserve(payload.len() * 8);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let (magic, rest) = split_line(bytes).ok_or_else(|| bad("missing magic line"))?;
        let expected = format!("{MAGIC} v{CHECKPOINT_VERSION}");
        if magic != expected.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "unsupported header `{}`, expected `{expected}`",
                String::from_utf8_lossy(magic)
            )));
        }
        let (len, rest) = split_line(rest).ok_or_else(|| bad("missing header length"))?;
        let len: usize = std::str::from_utf8(len)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header length"))?;
        if rest.len() < len + 1 || rest[len] != b'\n' {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len])?;
        let blob = &rest[len + 1..];
        if blob.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let slice = |offset: usize, len: usize| -> Result<Vec<f64>> {
            payload
                .get(offset..offset + len)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| bad("tensor extends past the payload"))
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.shape.iter().product();
            params.push((t.name.clone(), Tensor::new(t.shape.clone(), slice(t.offset, n)?)?));
        }
        let mut slots = vec![None; params.len()];
        for m in &header.optimizer.moments {
            let i = params
                .iter()
                .position(|(n, _)| *n == m.name)
                .ok_or_else(|| Error::Checkpoint(format!("moments for unknown tensor `{}`", m.name)))?;
            slots[i] = Some(AdamSlot {
                m: slice(m.m_offset, m.len)?,
                v: slice(m.v_offset, m.len)?,
                t: m.t,
            });
        }
        let adam = Adam {
            beta1: header.optimizer.beta1,
            beta2: header.optimizer.beta2,
            eps: header.optimizer.eps,
            slots,
        };
        Ok(Self {
            config: header.config,
            step: header.step,
            rng: header.rng,
            best_bleu: header.best_bleu,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the stored config and fills in the
    /// stored parameters.
    pub fn model(&self) -> Result<Model> {
        self.model_for(&self.config)
    }

    /// Builds the model described by `config` and fills in the stored
    /// parameters; names and shapes must match exactly.
    pub fn model_for(&self, config: &RunConfig) -> Result<Model> {
        let mut model = Model::new(
            config.model.clone(),
            config.experts.clone(),
            config.training.seed,
        )?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} tensors, checkpoint has {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .id_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no tensor `{name}`")))?;
            let param = model.store.get_mut(id);
            if param.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: model shape {:?}, checkpoint shape {:?}",
                    param.value.shape(),
                    value.shape()
                )));
            }
            param.value = value.clone();
        }
        Ok(model)
    }

    /// A trainer positioned exactly where the captured one stopped.
    pub fn trainer(&self, train: Vec<Example>) -> Result<Trainer> {
        let model = self.model()?;
        let mut adam = self.adam.clone();
        adam.slots.resize(model.store.len(), None);
        Trainer::resume(model, self.config.training.clone(), adam, self.rng, self.step, train)
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}
