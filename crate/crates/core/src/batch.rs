//! Padded mini-batches: per-point contexts, patch hierarchies and the
//! per-level lengths the model needs to build its masks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::blur::{build_hierarchy_with, dynamic_max_patch_len, PatchHierarchy, PatchLengths, PrecisionLevels};
use crate::error::Result;
use crate::geo::{spatial_context, temporal_context, BoundingBox, Trajectory};

pub const CONTEXT_DIM: usize = 6;

#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[size, max_len[0], 6]`, zero on padded points.
    pub spatial: Vec<f64>,
    /// `[size, max_len[0], 6]`, zero on padded points.
    pub temporal: Vec<f64>,
    pub hierarchies: Vec<PatchHierarchy>,
    /// Sequence length of every trajectory at levels 1, 2, 3.
    pub level_lens: [Vec<usize>; 3],
    pub max_len: [usize; 3],
    /// Dynamic maximum patch length for the 1->2 and 2->3 steps.
    pub max_patch: [usize; 2],
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    /// Validity of every position of `level` including the leading [CLS]
    /// slot: `[size * (max_len + 1)]`.
    pub fn level_mask(&self, level: usize) -> Vec<bool> {
        let n = self.max_len[level - 1];
        let lens = &self.level_lens[level - 1];
        let mut mask = Vec::with_capacity(lens.len() * (n + 1));
        for &len in lens {
            mask.extend((0..=n).map(|i| i <= len));
        }
        mask
    }

    /// Run lengths mapping `from` onto `to` for every trajectory.
    pub fn patch_lengths(&self, from: usize, to: usize) -> Vec<PatchLengths> {
        self.hierarchies
            .iter()
            .map(|h| match (from, to) {
                (1, 2) => h.lengths_12.clone(),
                (2, 3) => h.lengths_23.clone(),
                (1, 3) => h.lengths_13(),
                _ => panic!("no patch mapping from level {from} to {to}"),
            })
            .collect()
    }

    /// Spatial context of point `i` of trajectory `b`.
    pub fn spatial_at(&self, b: usize, i: usize) -> &[f64] {
        let o = (b * self.max_len[0] + i) * CONTEXT_DIM;
        &self.spatial[o..o + CONTEXT_DIM]
    }

    pub fn temporal_at(&self, b: usize, i: usize) -> &[f64] {
        let o = (b * self.max_len[0] + i) * CONTEXT_DIM;
        &self.temporal[o..o + CONTEXT_DIM]
    }

    /// Replace every point's temporal context with that of its first point,
    /// so only the departure time is visible.
    pub fn mask_temporal_to_first(&mut self) {
        let n = self.max_len[0];
        for b in 0..self.size() {
            let base = b * n * CONTEXT_DIM;
            let first: [f64; CONTEXT_DIM] = self.temporal[base..base + CONTEXT_DIM].try_into().unwrap();
            for i in 1..self.level_lens[0][b] {
                let o = base + i * CONTEXT_DIM;
                self.temporal[o..o + CONTEXT_DIM].copy_from_slice(&first);
            }
        }
    }
}

/// Assemble a padded batch.
pub fn make_batch(trajs: &[&Trajectory], bbox: &BoundingBox, precisions: PrecisionLevels) -> Result<Batch> {
    let hierarchies: Vec<PatchHierarchy> = trajs.iter().map(|t| build_hierarchy_with(t, precisions)).collect();
    let mut level_lens: [Vec<usize>; 3] = Default::default();
    for h in &hierarchies {
        for (l, lens) in level_lens.iter_mut().enumerate() {
            lens.push(h.level_len(l + 1));
        }
    }
    let max_len = [0, 1, 2].map(|l| level_lens[l].iter().copied().max().unwrap_or(0));
    let max_patch = [
        dynamic_max_patch_len(hierarchies.iter().map(|h| &h.lengths_12)),
        dynamic_max_patch_len(hierarchies.iter().map(|h| &h.lengths_23)),
    ];

    let n = max_len[0];
    let mut spatial = vec![0.0; trajs.len() * n * CONTEXT_DIM];
    let mut temporal = vec![0.0; trajs.len() * n * CONTEXT_DIM];
    for (b, t) in trajs.iter().enumerate() {
        let sc = spatial_context(t, bbox)?;
        for (i, (s, p)) in sc.iter().zip(&t.points).enumerate() {
            let o = (b * n + i) * CONTEXT_DIM;
            spatial[o..o + CONTEXT_DIM].copy_from_slice(&s.0);
            temporal[o..o + CONTEXT_DIM].copy_from_slice(&temporal_context(p.t).0);
        }
    }

    Ok(Batch {
        ids: trajs.iter().map(|t| t.id.clone()).collect(),
        spatial,
        temporal,
        hierarchies,
        level_lens,
        max_len,
        max_patch,
    })
}

/// Mini-batches of indices grouped by similar length to limit padding.
/// Equal lengths are ordered randomly and the batch order is shuffled.
pub fn bucketed_batches<R: Rng>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Deterministic length-sorted batches for evaluation.
pub fn sorted_batches(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
