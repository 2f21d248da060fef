//! Checkpoint file: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every parameter's values as little-endian `f64` in
//! header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BLUECKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub config_hash: String,
    /// Free-form metadata (model config, normalizer, ...).
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    config_hash: &str,
    meta: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        dtype: "f64".into(),
        config_hash: config_hash.into(),
        meta,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for p in params.iter() {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a checkpoint's header and load every named tensor into `params`.
/// Names and shapes must match exactly.
pub fn load_checkpoint(path: &Path, params: &mut ParamStore) -> Result<CheckpointHeader> {
    let (header, values) = read_checkpoint(path)?;
    if header.params.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            header.params.len(),
            params.len()
        )));
    }
    let mut offset = 0;
    for entry in &header.params {
        let id = params
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let p = params.get_mut(id);
        if p.tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in checkpoint, {:?} in model",
                entry.name,
                entry.shape,
                p.tensor.shape()
            )));
        }
        let n = p.tensor.numel();
        p.tensor.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(header)
}

/// Header and raw values without a model to load into.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let mut raw = vec![0u8; total * 8];
    r.read_exact(&mut raw).map_err(io)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}
