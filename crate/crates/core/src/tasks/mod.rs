//! Downstream tasks: travel time estimation, classification and
//! most-similar-trajectory search.

mod finetune;
pub mod metrics;
mod msts;

pub use finetune::{
    finetune_classify, finetune_tte, travel_time, tte_model, Classifier, ClassifyOutcome, EpochRecord,
    FinetuneConfig, TaskModel, TteModel, TteOutcome,
};
pub use metrics::{ClassificationReport, RegressionReport, RetrievalReport};
pub use msts::{build_msts_sets, downsample, eval_msts, msts_ranks, MstsSets};

use crate::batch::{make_batch, sorted_batches};
use crate::blur::PrecisionLevels;
use crate::error::Result;
use crate::geo::{BoundingBox, Trajectory};
use crate::model::BlueModel;

/// Trajectory representations in input order, computed in length-sorted
/// batches of `batch_size`.
pub fn embed_trajectories(
    model: &BlueModel,
    trajs: &[Trajectory],
    bbox: &BoundingBox,
    precisions: PrecisionLevels,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let lengths: Vec<usize> = trajs.iter().map(|t| t.points.len()).collect();
    let mut out = vec![Vec::new(); trajs.len()];
    for idx in sorted_batches(&lengths, batch_size.max(1)) {
        let refs: Vec<&Trajectory> = idx.iter().map(|&i| &trajs[i]).collect();
        let batch = make_batch(&refs, bbox, precisions)?;
        for (&i, v) in idx.iter().zip(model.embed(&batch)) {
            out[i] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
