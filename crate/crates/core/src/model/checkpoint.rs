//! Versioned checkpoint container. Float arrays are stored as base64 of their
//! little-endian bytes so that a round trip is bit-exact; the body carries a
//! SHA-256 over its canonical JSON.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::numerics::{AdamWConfig, OptimizerState, ParameterStore, Tensor};

use super::config::ModelConfig;
use super::transformer::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_f64s(xs: &[f64]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("bad array encoding: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("array byte length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SavedOptimizer {
    config: AdamWConfig,
    step: u64,
    m: Vec<String>,
    v: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Body {
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<NamedArray>,
    optimizer: Option<SavedOptimizer>,
    /// Caller-defined state (training progress, run hash, ...).
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Container {
    sha256: String,
    body: Body,
}

/// Everything needed to resume training or to decode.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub optimizer: Option<OptimizerState>,
    pub meta: serde_json::Value,
}

fn body_hash(body: &Body) -> Result<String> {
    let bytes = serde_json::to_vec(body)?;
    Ok(crate::fsutil::sha256_hex(&bytes))
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let params = self
            .model
            .store
            .params()
            .iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.value().shape().to_vec(),
                data: encode_f64s(p.value().data()),
            })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|o| SavedOptimizer {
            config: o.config,
            step: o.step,
            m: o.m.iter().map(|x| encode_f64s(x)).collect(),
            v: o.v.iter().map(|x| encode_f64s(x)).collect(),
        });
        let body = Body {
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            vocab: self.vocab.clone(),
            params,
            optimizer,
            meta: self.meta.clone(),
        };
        let sha256 = body_hash(&body)?;
        Ok(serde_json::to_string(&Container { sha256, body })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Container =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if c.body.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                c.body.version
            )));
        }
        if body_hash(&c.body)? != c.sha256 {
            return Err(Error::Checkpoint("content hash mismatch".into()));
        }
        let body = c.body;
        let mut store = ParameterStore::new();
        for p in &body.params {
            let t = Tensor::new(p.shape.clone(), decode_f64s(&p.data)?)
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", p.name)))?;
            store.add(p.name.clone(), t)?;
        }
        let model = Model::from_store(body.config, store)?;
        let mut vocab = body.vocab;
        vocab.rebuild_index();
        if vocab.len() != model.config.vocab_size || vocab.max_rows() != model.config.max_rows {
            return Err(Error::Checkpoint("vocabulary does not match the model".into()));
        }
        let optimizer = match body.optimizer {
            None => None,
            Some(o) => {
                let dec = |xs: &[String]| xs.iter().map(|s| decode_f64s(s)).collect::<Result<Vec<_>>>();
                let state = OptimizerState {
                    config: o.config,
                    step: o.step,
                    m: dec(&o.m)?,
                    v: dec(&o.v)?,
                };
                if !state.matches(&model.store) {
                    return Err(Error::Checkpoint("optimizer state does not match the model".into()));
                }
                Some(state)
            }
        };
        Ok(Checkpoint {
            model,
            vocab,
            optimizer,
            meta: body.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
