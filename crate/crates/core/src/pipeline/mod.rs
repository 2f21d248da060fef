//! Data formats, configuration, pretraining and synthetic data.

pub mod config;
pub mod jsonl;
pub mod synth;
pub mod train;

pub use config::{MstsConfig, RunConfig, TrainConfig, CONFIG_KEYS};
pub use jsonl::{load_jsonl, parse_jsonl, write_jsonl, LoadReport};
pub use synth::{generate_synthetic, SyntheticSpec};
pub use train::{
    evaluate_loss, load_pretrained, pretrain, save_pretrained, split_dataset, write_history_csv, EpochLog,
    ModelCard, PretrainOutcome, Pretrained,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blur::{build_hierarchy_with, PrecisionLevels};
use crate::error::{Error, Result};
use crate::geo::Trajectory;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"BLUEEMBD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub count: usize,
    pub d: usize,
    pub dtype: String,
    pub ids: Vec<String>,
}

/// Magic, little-endian `u64` header length, JSON header, then `count * d`
/// little-endian `f64` values row by row.
pub fn write_embeddings(path: &Path, ids: &[String], vectors: &[Vec<f64>]) -> Result<()> {
    let d = vectors.first().map_or(0, Vec::len);
    if ids.len() != vectors.len() || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape(format!(
            "{} ids for {} vectors of width {d}",
            ids.len(),
            vectors.len()
        )));
    }
    let header = serde_json::to_vec(&EmbeddingHeader {
        count: vectors.len(),
        d,
        dtype: "f64".into(),
        ids: ids.to_vec(),
    })?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for v in vectors.iter().flatten() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingHeader, Vec<Vec<f64>>)> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not an embedding file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: EmbeddingHeader = serde_json::from_slice(&header)?;
    let mut raw = vec![0u8; header.count * header.d * 8];
    r.read_exact(&mut raw).map_err(io)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let rows = values.chunks(header.d.max(1)).take(header.count).map(<[f64]>::to_vec).collect();
    Ok((header, rows))
}

/// Average sequence length at each level of the patch pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub count: usize,
    pub precisions: [u32; 3],
    pub avg_len: [f64; 3],
    pub max_len: [usize; 3],
    /// Level-3 over level-1 average length.
    pub compression: f64,
}

pub fn encode_stats(trajs: &[Trajectory], precisions: PrecisionLevels) -> Result<EncodeStats> {
    precisions.validate()?;
    if trajs.is_empty() {
        return Err(Error::InsufficientData("no trajectories to summarize".into()));
    }
    let mut sum = [0usize; 3];
    let mut max = [0usize; 3];
    for t in trajs {
        let h = build_hierarchy_with(t, precisions);
        for l in 0..3 {
            let n = h.level_len(l + 1);
            sum[l] += n;
            max[l] = max[l].max(n);
        }
    }
    let avg_len = sum.map(|s| s as f64 / trajs.len() as f64);
    Ok(EncodeStats {
        count: trajs.len(),
        precisions: precisions.0,
        avg_len,
        max_len: max,
        compression: avg_len[2] / avg_len[0],
    })
}
