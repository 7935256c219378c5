//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `NEUVECCK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the
//! parameter vector as little-endian `f64` followed by the two AdamW
//! moment vectors when optimizer state is present.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Augmentation, ModelConfig, NeuVecModel};
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, AdamWState};
use crate::rng::RngSnapshot;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NEUVECCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: NeuVecModel,
    pub seed: u64,
    pub iteration: u64,
    pub rng: Option<RngSnapshot>,
    pub optimizer: Option<AdamWState>,
    /// Caller-defined run settings, kept so a run can be resumed.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    config: AdamWConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    d: usize,
    d_a: usize,
    augmentation: Augmentation,
    widths: BTreeMap<String, Vec<usize>>,
    model: ModelConfig,
    n_params: usize,
    seed: u64,
    iteration: u64,
    rng: Option<RngSnapshot>,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: NeuVecModel, seed: u64) -> Self {
        Self {
            model,
            seed,
            iteration: 0,
            rng: None,
            optimizer: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.model.config();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            d: cfg.d,
            d_a: cfg.d_a(),
            augmentation: cfg.augmentation,
            widths: cfg
                .blocks()
                .into_iter()
                .map(|(n, b)| (n.to_string(), b.widths.clone()))
                .collect(),
            model: cfg.clone(),
            n_params: self.model.n_params(),
            seed: self.seed,
            iteration: self.iteration,
            rng: self.rng,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                config: o.config.clone(),
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 24 * self.model.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(self.model.params());
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).unwrap_or_default();
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut values = body[hlen..].chunks_exact(8);
        if !values.remainder().is_empty() {
            return Err(corrupt("parameter section is not a whole number of f64 values"));
        }
        let n = header.n_params;
        let blocks = if header.optimizer.is_some() { 3 } else { 1 };
        if values.len() != blocks * n {
            return Err(corrupt(format!(
                "expected {} values, found {}",
                blocks * n,
                values.len()
            )));
        }
        let mut take = || -> Vec<f64> {
            (&mut values)
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let params = take();
        let optimizer = header.optimizer.map(|o| AdamWState {
            step: o.step,
            m: take(),
            v: take(),
            config: o.config,
        });
        let model = NeuVecModel::from_parts(header.model, params)?;
        if model.config().d != header.d || model.config().d_a() != header.d_a {
            return Err(corrupt("header dimensions disagree with the model configuration"));
        }
        Ok(Self {
            model,
            seed: header.seed,
            iteration: header.iteration,
            rng: header.rng,
            optimizer,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
