//! Blurred encoding: a patch pyramid induced by rounding coordinates.
//!
//! Level 1 is the raw point sequence. Rounding every point to 3 decimals
//! and merging consecutive equal keys yields the level-2 patch sequence;
//! rounding the level-2 keys to 2 decimals and merging again yields
//! level 3. The run lengths at each step are what the encoder uses to
//! group rows before pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Trajectory;

/// Decimal precision per level, finest first. Level 1 is nominal: raw
/// coordinates are never rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionLevels(pub [u32; 3]);

impl Default for PrecisionLevels {
    fn default() -> Self {
        Self([5, 3, 2])
    }
}

impl PrecisionLevels {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.0;
        if !(a > b && b > c) || a > 9 {
            return Err(Error::Config(format!(
                "precisions must be strictly decreasing and at most 9, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

/// Round `x` to `decimals` places, ties away from zero.
///
/// Ties are decided on the scaled binary value `x * 10^decimals`.
pub fn round_coord(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (x * scale).round() / scale
}

fn scaled(x: f64, decimals: u32) -> i64 {
    (x * 10f64.powi(decimals as i32)).round() as i64
}

/// Integer division by `10^shift` rounding ties away from zero.
fn shift_round(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let div = 10i64.pow(shift);
    let q = v / div;
    let r = v % div;
    if 2 * r.abs() >= div {
        q + v.signum()
    } else {
        q
    }
}

/// A rounded `(lon, lat)` cell. Coordinates are stored as exact integers
/// in units of `10^-decimals` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchKey {
    pub lon: i64,
    pub lat: i64,
    pub decimals: u32,
}

impl PatchKey {
    pub fn from_coords(lon: f64, lat: f64, decimals: u32) -> Self {
        Self {
            lon: scaled(lon, decimals),
            lat: scaled(lat, decimals),
            decimals,
        }
    }

    /// Re-round this key to fewer decimals.
    pub fn coarsen(&self, decimals: u32) -> Self {
        assert!(decimals <= self.decimals, "cannot refine a patch key");
        let shift = self.decimals - decimals;
        Self {
            lon: shift_round(self.lon, shift),
            lat: shift_round(self.lat, shift),
            decimals,
        }
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon as f64 / 10f64.powi(self.decimals as i32)
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat as f64 / 10f64.powi(self.decimals as i32)
    }
}

/// Run lengths mapping a finer sequence onto the next coarser one.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchLengths(pub Vec<usize>);

impl PatchLengths {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// Start offset of every patch in the finer sequence.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.0
            .iter()
            .map(|&l| {
                let start = acc;
                acc += l;
                start
            })
            .collect()
    }

    /// Lengths of `coarser` patches measured in units of this level's
    /// finer sequence: `self` maps A -> B, `coarser` maps B -> C, the
    /// result maps A -> C.
    pub fn compose(&self, coarser: &PatchLengths) -> PatchLengths {
        let mut out = Vec::with_capacity(coarser.len());
        let mut it = self.0.iter();
        for &n in &coarser.0 {
            out.push(it.by_ref().take(n).sum());
        }
        PatchLengths(out)
    }
}

/// Merge maximal runs of consecutive equal keys. Non-adjacent repeats of a
/// key are separate patches.
pub fn group_run_length<K: PartialEq>(keys: &[K]) -> PatchLengths {
    let mut lengths = Vec::new();
    let mut iter = keys.iter();
    let Some(mut current) = iter.next() else {
        return PatchLengths(lengths);
    };
    let mut run = 1;
    for k in iter {
        if k == current {
            run += 1;
        } else {
            lengths.push(run);
            current = k;
            run = 1;
        }
    }
    lengths.push(run);
    PatchLengths(lengths)
}

/// The three-level pyramid of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchHierarchy {
    pub level1_len: usize,
    pub lengths_12: PatchLengths,
    pub lengths_23: PatchLengths,
    pub keys_2: Vec<PatchKey>,
    pub keys_3: Vec<PatchKey>,
}

impl PatchHierarchy {
    /// Sequence length at `level` (1, 2 or 3).
    pub fn level_len(&self, level: usize) -> usize {
        match level {
            1 => self.level1_len,
            2 => self.lengths_12.len(),
            3 => self.lengths_23.len(),
            _ => panic!("no level {level}"),
        }
    }

    /// Level-1 -> level-3 run lengths.
    pub fn lengths_13(&self) -> PatchLengths {
        self.lengths_12.compose(&self.lengths_23)
    }

    /// Checks conservation and key counts; violations are construction bugs.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lengths_12.total() == self.level1_len
            && self.lengths_23.total() == self.lengths_12.len()
            && self.keys_2.len() == self.lengths_12.len()
            && self.keys_3.len() == self.lengths_23.len()
            && self.lengths_12.iter().all(|l| l >= 1)
            && self.lengths_23.iter().all(|l| l >= 1);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidTrajectory(format!(
                "inconsistent patch hierarchy: |T1|={}, L12 sum {} len {}, L23 sum {} len {}",
                self.level1_len,
                self.lengths_12.total(),
                self.lengths_12.len(),
                self.lengths_23.total(),
                self.lengths_23.len()
            )))
        }
    }
}

/// Build the pyramid with the default precisions `{5, 3, 2}`.
pub fn build_hierarchy(traj: &Trajectory) -> PatchHierarchy {
    build_hierarchy_with(traj, PrecisionLevels::default())
}

pub fn build_hierarchy_with(traj: &Trajectory, precisions: PrecisionLevels) -> PatchHierarchy {
    let [_, p2, p3] = precisions.0;
    let raw_keys: Vec<PatchKey> = traj
        .points
        .iter()
        .map(|p| PatchKey::from_coords(p.lon, p.lat, p2))
        .collect();
    let lengths_12 = group_run_length(&raw_keys);
    let keys_2: Vec<PatchKey> = lengths_12
        .offsets()
        .into_iter()
        .map(|start| raw_keys[start])
        .collect();

    let coarse: Vec<PatchKey> = keys_2.iter().map(|k| k.coarsen(p3)).collect();
    let lengths_23 = group_run_length(&coarse);
    let keys_3 = lengths_23
        .offsets()
        .into_iter()
        .map(|start| coarse[start])
        .collect();

    PatchHierarchy {
        level1_len: traj.len(),
        lengths_12,
        lengths_23,
        keys_2,
        keys_3,
    }
}

/// Largest patch length across a batch of run-length lists at one level.
pub fn dynamic_max_patch_len<'a, I>(batch: I) -> usize
where
    I: IntoIterator<Item = &'a PatchLengths>,
{
    batch.into_iter().map(PatchLengths::max).max().unwrap_or(0)
}
