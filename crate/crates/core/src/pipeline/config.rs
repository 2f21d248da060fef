//! Flat `key = value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Lists are comma
//! separated. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::synth::SyntheticSpec;
use crate::blur::PrecisionLevels;
use crate::error::{Error, Result};
use crate::geo::DEFAULT_D_MAX;
use crate::model::{ModelConfig, Pooling};
use crate::preprocess::PreprocessConfig;
use crate::tasks::FinetuneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Threads used for batch assembly.
    pub workers: usize,
    /// Each batch is evaluated in length-sorted chunks of at most this many
    /// trajectories whose gradients are summed before the update. Less
    /// padding, same update.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-4,
            epochs: 30,
            seed: 0,
            split: [0.6, 0.2, 0.2],
            workers: 1,
            micro_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.workers == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch_size, workers and micro_batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be non-negative and sum to 1, got {:?}", self.split)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MstsConfig {
    pub n_query: usize,
    pub n_db: usize,
    pub drop_ratio: f64,
}

impl Default for MstsConfig {
    fn default() -> Self {
        Self {
            n_query: 1000,
            n_db: 10_000,
            drop_ratio: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub d_max: f64,
    pub precisions: PrecisionLevels,
    pub finetune: FinetuneConfig,
    pub msts: MstsConfig,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            d_max: DEFAULT_D_MAX,
            precisions: PrecisionLevels::default(),
            finetune: FinetuneConfig::default(),
            msts: MstsConfig::default(),
            synth: SyntheticSpec::default(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "model.d",
    "model.heads",
    "model.layers",
    "model.dropout",
    "model.pooling",
    "model.levels",
    "model.ffn_mult",
    "model.per_point_mean",
    "train.batch_size",
    "train.lr",
    "train.epochs",
    "train.seed",
    "train.split",
    "train.workers",
    "train.micro_batch",
    "preprocess.v_max",
    "preprocess.cluster_radius",
    "preprocess.cluster_count",
    "preprocess.min_length",
    "preprocess.min_level3_len",
    "geo.d_max",
    "blur.precisions",
    "finetune.lr",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.freeze_encoder",
    "finetune.seed",
    "msts.n_query",
    "msts.n_db",
    "msts.drop_ratio",
    "synth.n",
    "synth.lon_min",
    "synth.lon_max",
    "synth.lat_min",
    "synth.lat_max",
    "synth.speed_mps",
    "synth.dt_s",
    "synth.regimes",
    "synth.min_points",
    "synth.max_points",
    "synth.seed",
];

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| scalar(key, p.trim())).collect()
}

fn array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = list(key, v)?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values, got {v:?}")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model.d" => self.model.d = scalar(key, v)?,
            "model.heads" => self.model.heads = scalar(key, v)?,
            "model.layers" => self.model.layers = array(key, v)?,
            "model.dropout" => self.model.dropout = scalar(key, v)?,
            "model.pooling" => self.model.pooling = Pooling::from_str(v)?,
            "model.levels" => self.model.levels = list(key, v)?,
            "model.ffn_mult" => self.model.ffn_mult = scalar(key, v)?,
            "model.per_point_mean" => self.model.per_point_mean = scalar(key, v)?,
            "train.batch_size" => self.train.batch_size = scalar(key, v)?,
            "train.lr" => self.train.lr = scalar(key, v)?,
            "train.epochs" => self.train.epochs = scalar(key, v)?,
            "train.seed" => self.train.seed = scalar(key, v)?,
            "train.split" => self.train.split = array(key, v)?,
            "train.workers" => self.train.workers = scalar(key, v)?,
            "train.micro_batch" => self.train.micro_batch = scalar(key, v)?,
            "preprocess.v_max" => self.preprocess.v_max = scalar(key, v)?,
            "preprocess.cluster_radius" => self.preprocess.cluster_radius = scalar(key, v)?,
            "preprocess.cluster_count" => self.preprocess.cluster_count = scalar(key, v)?,
            "preprocess.min_length" => self.preprocess.min_length = scalar(key, v)?,
            "preprocess.min_level3_len" => self.preprocess.min_level3_len = scalar(key, v)?,
            "geo.d_max" => self.d_max = scalar(key, v)?,
            "blur.precisions" => self.precisions = PrecisionLevels(array(key, v)?),
            "finetune.lr" => self.finetune.lr = scalar(key, v)?,
            "finetune.epochs" => self.finetune.epochs = scalar(key, v)?,
            "finetune.batch_size" => self.finetune.batch_size = scalar(key, v)?,
            "finetune.freeze_encoder" => self.finetune.freeze_encoder = scalar(key, v)?,
            "finetune.seed" => self.finetune.seed = scalar(key, v)?,
            "msts.n_query" => self.msts.n_query = scalar(key, v)?,
            "msts.n_db" => self.msts.n_db = scalar(key, v)?,
            "msts.drop_ratio" => self.msts.drop_ratio = scalar(key, v)?,
            "synth.n" => self.synth.n = scalar(key, v)?,
            "synth.lon_min" => self.synth.lon_min = scalar(key, v)?,
            "synth.lon_max" => self.synth.lon_max = scalar(key, v)?,
            "synth.lat_min" => self.synth.lat_min = scalar(key, v)?,
            "synth.lat_max" => self.synth.lat_max = scalar(key, v)?,
            "synth.speed_mps" => self.synth.speed_mps = scalar(key, v)?,
            "synth.dt_s" => self.synth.dt_s = scalar(key, v)?,
            "synth.regimes" => self.synth.regimes = list(key, v)?,
            "synth.min_points" => self.synth.min_points = scalar(key, v)?,
            "synth.max_points" => self.synth.max_points = scalar(key, v)?,
            "synth.seed" => self.synth.seed = scalar(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model.d" => self.model.d.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.layers" => join(&self.model.layers),
            "model.dropout" => self.model.dropout.to_string(),
            "model.pooling" => serde_json::to_value(self.model.pooling).ok()?.as_str()?.to_string(),
            "model.levels" => join(&self.model.levels),
            "model.ffn_mult" => self.model.ffn_mult.to_string(),
            "model.per_point_mean" => self.model.per_point_mean.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.split" => join(&self.train.split),
            "train.workers" => self.train.workers.to_string(),
            "train.micro_batch" => self.train.micro_batch.to_string(),
            "preprocess.v_max" => self.preprocess.v_max.to_string(),
            "preprocess.cluster_radius" => self.preprocess.cluster_radius.to_string(),
            "preprocess.cluster_count" => self.preprocess.cluster_count.to_string(),
            "preprocess.min_length" => self.preprocess.min_length.to_string(),
            "preprocess.min_level3_len" => self.preprocess.min_level3_len.to_string(),
            "geo.d_max" => self.d_max.to_string(),
            "blur.precisions" => join(&self.precisions.0),
            "finetune.lr" => self.finetune.lr.to_string(),
            "finetune.epochs" => self.finetune.epochs.to_string(),
            "finetune.batch_size" => self.finetune.batch_size.to_string(),
            "finetune.freeze_encoder" => self.finetune.freeze_encoder.to_string(),
            "finetune.seed" => self.finetune.seed.to_string(),
            "msts.n_query" => self.msts.n_query.to_string(),
            "msts.n_db" => self.msts.n_db.to_string(),
            "msts.drop_ratio" => self.msts.drop_ratio.to_string(),
            "synth.n" => self.synth.n.to_string(),
            "synth.lon_min" => self.synth.lon_min.to_string(),
            "synth.lon_max" => self.synth.lon_max.to_string(),
            "synth.lat_min" => self.synth.lat_min.to_string(),
            "synth.lat_max" => self.synth.lat_max.to_string(),
            "synth.speed_mps" => self.synth.speed_mps.to_string(),
            "synth.dt_s" => self.synth.dt_s.to_string(),
            "synth.regimes" => join(&self.synth.regimes),
            "synth.min_points" => self.synth.min_points.to_string(),
            "synth.max_points" => self.synth.max_points.to_string(),
            "synth.seed" => self.synth.seed.to_string(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, one per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Set every seed that is not meant to differ between components.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.finetune.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        self.precisions.validate()?;
        self.synth.validate()?;
        if !(self.d_max > 0.0) {
            return Err(Error::Config(format!("geo.d_max must be positive, got {}", self.d_max)));
        }
        if self.finetune.batch_size == 0 || !(self.finetune.lr > 0.0) {
            return Err(Error::Config("finetune batch_size and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.msts.drop_ratio) {
            return Err(Error::Config(format!("msts.drop_ratio must lie in [0, 1), got {}", self.msts.drop_ratio)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let c = RunConfig::parse(
            "# sweep\nmodel.d = 64\nmodel.levels = 1, 3\nmodel.pooling = mean  # ablation\n\ntrain.split = 0.8,0.1,0.1\nblur.precisions = 4,3,2\n",
        )
        .unwrap();
        assert_eq!(c.model.d, 64);
        assert_eq!(c.model.levels, vec![1, 3]);
        assert_eq!(c.model.pooling, Pooling::Mean);
        assert_eq!(c.train.split, [0.8, 0.1, 0.1]);
        assert_eq!(c.precisions.0, [4, 3, 2]);
        assert_eq!(c.train.batch_size, 256);
    }

    #[test]
    fn unknown_key_is_fatal() {
        let err = RunConfig::parse("model.d = 64\nmodel.dd = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("model.dd"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("model.d = 7\n").is_err());
        assert!(RunConfig::parse("train.split = 0.5,0.5\n").is_err());
        assert!(RunConfig::parse("train.split = 0.5,0.4,0.4\n").is_err());
        assert!(RunConfig::parse("model.pooling = median\n").is_err());
        assert!(RunConfig::parse("no equals sign\n").is_err());
    }

    #[test]
    fn render_round_trips_every_key() {
        let mut c = RunConfig::default();
        c.model.levels = vec![2, 3];
        c.synth.regimes = vec![0.1, 0.5, 2.0];
        c.train.lr = 3e-4;
        let text = c.render();
        assert_eq!(text.lines().count(), CONFIG_KEYS.len());
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        for key in CONFIG_KEYS {
            assert!(c.get(key).is_some(), "{key}");
        }
    }
}
