//! Shared fixtures for the benchmarks under `benches/`.

use blue_core::batch::{make_batch, Batch};
use blue_core::blur::PrecisionLevels;
use blue_core::pipeline::{generate_synthetic, SyntheticSpec};
use blue_core::{BoundingBox, Trajectory};

/// Seeded synthetic corpus of `n` trajectories with 20 to 60 points.
pub fn corpus(n: usize, seed: u64) -> Vec<Trajectory> {
    generate_synthetic(&SyntheticSpec {
        n,
        seed,
        ..SyntheticSpec::default()
    })
    .expect("default synthetic spec is valid")
}

/// One batch over all of `trajs`, normalized by their own bounding box.
pub fn batch_of(trajs: &[Trajectory]) -> (BoundingBox, Batch) {
    let bbox = BoundingBox::fit(trajs, 1000.0).expect("non-empty corpus");
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let batch = make_batch(&refs, &bbox, PrecisionLevels::default()).expect("valid batch");
    (bbox, batch)
}
