//! Checkpoint file: magic `QSMCKPT1`, u32 LE manifest length, JSON
//! manifest, then every parameter's values followed by every parameter's
//! RMSprop accumulator, all as f64 LE in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qsm_core::io::write_atomic;

use crate::error::{NnError, Result};
use crate::net::NetConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainProgress};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QSMCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub net: NetConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub progress: TrainProgress,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub store: ParamStore,
}

pub fn encode_checkpoint(
    net: &NetConfig,
    train: Option<&TrainConfig>,
    progress: &TrainProgress,
    store: &ParamStore,
) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        net: net.clone(),
        train: train.cloned(),
        step: store.step,
        progress: progress.clone(),
        params: store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, v)| ParamEntry { name: n.clone(), shape: v.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| NnError::Checkpoint("manifest too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 16 * store.count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.values().iter().chain(store.accumulators()) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("missing QSMCKPT1 magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| NnError::Checkpoint("truncated manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(body)?;
    let mut payload = &bytes[12 + len..];
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != 16 * total {
        return Err(NnError::Checkpoint(format!("payload is {} bytes, manifest needs {}", payload.len(), 16 * total)));
    }
    let mut read = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let (head, rest) = payload.split_at(8 * n);
        payload = rest;
        Tensor::new(
            shape.to_vec(),
            head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        )
    };
    let values = manifest.params.iter().map(|p| read(&p.shape)).collect::<Result<Vec<_>>>()?;
    let accum = manifest.params.iter().map(|p| read(&p.shape)).collect::<Result<Vec<_>>>()?;
    let names = manifest.params.iter().map(|p| p.name.clone()).collect();
    let store = ParamStore::from_parts(names, values, accum, manifest.step)?;
    Ok(Checkpoint { manifest, store })
}

pub fn save_checkpoint(
    path: &Path,
    net: &NetConfig,
    train: Option<&TrainConfig>,
    progress: &TrainProgress,
    store: &ParamStore,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net, train, progress, store)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
