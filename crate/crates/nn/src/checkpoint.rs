//! `RDCK` checkpoint files: magic, `u32` version, `u32` header length, a
//! JSON header listing parameters in store order, then every parameter as
//! little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub params: Vec<ParamEntry>,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Worker threads used for the run that produced these values.
    pub threads: usize,
    /// Free-form run configuration, enough to rebuild the model.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub threads: usize,
    pub config: serde_json::Value,
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        params: store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
            })
            .collect(),
        step: store.step(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        threads: meta.threads,
        config: meta.config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * store.num_scalars());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for &x in store.value(id).data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, CheckpointHeader)> {
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or(NnError::Truncated);
    let magic: [u8; 4] = take(0, 4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::BadMagic(magic));
    }
    let u32_at = |at: usize| -> Result<u32> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().expect("4 bytes"))) };
    let version = u32_at(4)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::BadVersion(version));
    }
    let hlen = u32_at(8)? as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(12, hlen)?)?;
    let mut store = ParamStore::new();
    let mut at = 12 + hlen;
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let raw = take(at, 4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?)?;
        at += 4 * n;
    }
    if at != bytes.len() {
        return Err(NnError::ShapeMismatch {
            op: "checkpoint",
            detail: format!("{} trailing bytes", bytes.len() - at),
        });
    }
    store.set_step(header.step);
    Ok((store, header))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode_checkpoint(store, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path)?)
}
