//! Versioned checkpoint files.
//!
//! Layout: 8-byte magic `DSRANCKP`, `u32` LE format version, `u64` LE header
//! length, a UTF-8 JSON header, then every tensor as `f64` LE in header order
//! followed by each batch-norm layer's running mean and variance.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DSRANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnEntry {
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub epoch: usize,
    /// Free-form record of the run that produced the checkpoint.
    pub run: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub batch_norm: Vec<BnEntry>,
}

pub fn encode(model: &Model, epoch: usize, run: serde_json::Value) -> Vec<u8> {
    let store = &model.store;
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        epoch,
        run,
        tensors: store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, v)| TensorEntry {
                name: n.clone(),
                shape: [v.nrows(), v.ncols()],
            })
            .collect(),
        batch_norm: store
            .bn_names()
            .iter()
            .zip(store.bn_states())
            .map(|(n, s)| BnEntry {
                name: n.clone(),
                channels: s.channels(),
                momentum: s.momentum,
                epsilon: s.epsilon,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in store.values() {
        out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
    }
    for s in store.bn_states() {
        out.extend(s.running_mean.iter().flat_map(|x| x.to_le_bytes()));
        out.extend(s.running_var.iter().flat_map(|x| x.to_le_bytes()));
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body_start])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut model = Model::new(header.model.clone(), 0)?;
    let store = &mut model.store;
    if header.tensors.len() != store.len() || header.batch_norm.len() != store.bn_states().len() {
        return Err(bad("tensor list does not match the model configuration"));
    }
    let mut floats = bytes[body_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    if !(bytes.len() - body_start).is_multiple_of(8) {
        return Err(bad("blob is not a whole number of f64 values"));
    }
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = floats.by_ref().take(n).collect();
        if v.len() != n {
            return Err(bad("truncated parameter blob"));
        }
        Ok(v)
    };
    for (i, entry) in header.tensors.iter().enumerate() {
        let expected = store.values()[i].dim();
        if entry.name != store.names()[i] || (entry.shape[0], entry.shape[1]) != expected {
            return Err(Error::Checkpoint(format!(
                "tensor {} does not match model parameter {}",
                entry.name,
                store.names()[i]
            )));
        }
        let data = take(expected.0 * expected.1)?;
        store.values_mut()[i] = Tensor::from_shape_vec(expected, data).expect("sized");
    }
    for (i, entry) in header.batch_norm.iter().enumerate() {
        let channels = store.bn_states()[i].channels();
        if entry.channels != channels {
            return Err(Error::Checkpoint(format!(
                "batch norm {} channel mismatch",
                entry.name
            )));
        }
        let mean = Array1::from(take(channels)?);
        let var = Array1::from(take(channels)?);
        let state = &mut store.bn_states_mut()[i];
        state.running_mean = mean;
        state.running_var = var;
        state.momentum = entry.momentum;
        state.epsilon = entry.epsilon;
        state.validate()?;
    }
    if floats.next().is_some() {
        return Err(bad("trailing bytes after parameter blob"));
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, epoch: usize, run: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model, epoch, run)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
