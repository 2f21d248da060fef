use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Attention,
    Min,
    Max,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Pooling::Attention),
            "min" => Ok(Pooling::Min),
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width; must be even and divisible by `heads`.
    pub d: usize,
    pub heads: usize,
    /// Transformer layers at levels 1, 2, 3, shared by encoder and decoder.
    pub layers: [usize; 3],
    pub dropout: f64,
    pub pooling: Pooling,
    /// Enabled levels. Level 1 toggles only the level-1 transformers; the
    /// point embeddings always enter the model. Levels 2 and 3 toggle the
    /// corresponding patch stage.
    pub levels: Vec<usize>,
    pub ffn_mult: usize,
    /// Normalize each trajectory's loss by its point count.
    pub per_point_mean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            layers: [2, 4, 2],
            dropout: 0.1,
            pooling: Pooling::Attention,
            levels: vec![1, 2, 3],
            ffn_mult: 4,
            per_point_mean: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return bad(format!("d must be even and positive, got {}", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.levels || sorted.is_empty() || sorted.iter().any(|l| !(1..=3).contains(l)) {
            return bad(format!(
                "levels must be a sorted non-empty subset of {{1, 2, 3}}, got {:?}",
                self.levels
            ));
        }
        if self.pooled_levels().is_empty() && !self.level1_transformer() {
            return bad("at least one transformer stage must be enabled".into());
        }
        for &l in &self.levels {
            if self.layers[l - 1] == 0 {
                return bad(format!("enabled level {l} has zero layers"));
            }
        }
        Ok(())
    }

    pub fn level1_transformer(&self) -> bool {
        self.levels.contains(&1)
    }

    /// Enabled patch levels (2 and/or 3), finest first.
    pub fn pooled_levels(&self) -> Vec<usize> {
        self.levels.iter().copied().filter(|&l| l > 1).collect()
    }

    /// Every level that carries a sequence through the network.
    pub fn sequence_levels(&self) -> Vec<usize> {
        let mut v = vec![1];
        v.extend(self.pooled_levels());
        v
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
