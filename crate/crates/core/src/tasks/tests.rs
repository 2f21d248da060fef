use super::*;
use crate::geo::GpsPoint;
use crate::model::{ModelConfig, Pooling};
use crate::pipeline::synth::{generate_synthetic, SyntheticSpec};

fn corpus(n: usize, seed: u64) -> Vec<Trajectory> {
    generate_synthetic(&SyntheticSpec {
        n,
        seed,
        min_points: 8,
        max_points: 20,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn tiny_model(seed: u64) -> BlueModel {
    BlueModel::new(
        ModelConfig {
            d: 8,
            heads: 2,
            layers: [1, 1, 1],
            dropout: 0.0,
            pooling: Pooling::Attention,
            levels: vec![1, 2, 3],
            ffn_mult: 2,
            per_point_mean: false,
        },
        seed,
    )
    .unwrap()
}

fn bbox_of(trajs: &[Trajectory]) -> BoundingBox {
    BoundingBox::fit(trajs, 1000.0).unwrap()
}

#[test]
fn travel_time_is_timestamp_difference() {
    // 10:00:00 to 10:05:30
    let t0 = 1_400_000_000 - 1_400_000_000 % 86_400 + 36_000;
    let t = Trajectory::new(
        "a",
        vec![GpsPoint::new(8.6, 41.1, t0), GpsPoint::new(8.61, 41.1, t0 + 100), GpsPoint::new(8.62, 41.1, t0 + 330)],
        None,
    )
    .unwrap();
    assert_eq!(travel_time(&t), 330.0);
}

#[test]
fn tte_prediction_ignores_later_timestamps() {
    let data = corpus(6, 1);
    let bbox = bbox_of(&data);
    let tte = tte_model(&tiny_model(2), bbox, PrecisionLevels::default(), &data, 3).unwrap();
    let base = tte.predict(&data, 4).unwrap();
    let mut shifted = data.clone();
    for t in &mut shifted {
        let n = t.points.len();
        for (i, p) in t.points.iter_mut().enumerate().skip(1) {
            // keep time order, move every later point by hours and days
            p.t += 90_061 + 7 * (i as i64) + if i == n - 1 { 1_000_000 } else { 0 };
        }
    }
    assert_eq!(tte.predict(&shifted, 4).unwrap(), base);
    // the departure time is still visible
    let mut moved = data.clone();
    for p in &mut moved[0].points {
        p.t += 3 * 3600;
    }
    assert_ne!(tte.predict(&moved, 4).unwrap()[0], base[0]);
}

#[test]
fn tte_finetuning_reduces_training_loss() {
    let data = corpus(24, 4);
    let bbox = bbox_of(&data);
    let cfg = FinetuneConfig {
        lr: 3e-3,
        epochs: 8,
        batch_size: 8,
        seed: 5,
        freeze_encoder: false,
    };
    let out = finetune_tte(&tiny_model(6), bbox, PrecisionLevels::default(), &data[..16], &data[16..], &cfg).unwrap();
    assert_eq!(out.history.len(), 8);
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "loss {first} -> {last}");
    assert!(out.report.mae.is_finite() && out.report.rmse >= out.report.mae);
}

#[test]
fn frozen_encoder_only_moves_the_head() {
    let data = corpus(10, 7);
    let bbox = bbox_of(&data);
    let model = tiny_model(8);
    let cfg = FinetuneConfig {
        lr: 1e-2,
        epochs: 2,
        batch_size: 4,
        seed: 1,
        freeze_encoder: true,
    };
    let out = finetune_classify(&model, bbox, PrecisionLevels::default(), &data[..6], &data[6..], &cfg).unwrap();
    let tuned = &out.model.task.model.params;
    for (a, b) in model.params.iter().zip(tuned.iter()) {
        assert_eq!(a.tensor, b.tensor, "{} changed", a.name);
    }
    let head = tuned.find("task.head.fc1.weight").unwrap();
    assert_eq!(tuned.get(head).step_count as usize, out.history.len() * 2);
}

#[test]
fn classifier_learns_a_spatial_label() {
    let mut data = corpus(80, 9);
    let mid = (SyntheticSpec::default().lon_min + SyntheticSpec::default().lon_max) / 2.0;
    for t in &mut data {
        t.label = Some(i64::from(t.points[0].lon > mid));
    }
    let bbox = bbox_of(&data);
    let cfg = FinetuneConfig {
        lr: 5e-3,
        epochs: 40,
        batch_size: 16,
        seed: 2,
        freeze_encoder: false,
    };
    let out = finetune_classify(&tiny_model(3), bbox, PrecisionLevels::default(), &data[..60], &data[60..], &cfg).unwrap();
    assert_eq!(out.model.classes, vec![0, 1]);
    assert!(out.report.accuracy >= 0.8, "accuracy {}", out.report.accuracy);
}

#[test]
fn unseen_label_is_an_error() {
    let mut data = corpus(8, 10);
    let bbox = bbox_of(&data);
    data[7].label = Some(42);
    let cfg = FinetuneConfig {
        epochs: 1,
        batch_size: 4,
        ..FinetuneConfig::default()
    };
    assert!(finetune_classify(&tiny_model(1), bbox, PrecisionLevels::default(), &data[..6], &data[6..], &cfg).is_err());
}

#[test]
fn embeddings_do_not_depend_on_batch_size() {
    let data = corpus(20, 11);
    let bbox = bbox_of(&data);
    let model = tiny_model(12);
    let one = embed_trajectories(&model, &data, &bbox, PrecisionLevels::default(), 1).unwrap();
    let many = embed_trajectories(&model, &data, &bbox, PrecisionLevels::default(), 64).unwrap();
    for (a, b) in one.iter().zip(&many) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn msts_is_invariant_to_database_order() {
    let data = corpus(40, 13);
    let bbox = bbox_of(&data);
    let model = tiny_model(14);
    let sets = build_msts_sets(&data, 8, 20, 0.3, 15).unwrap();
    let q = embed_trajectories(&model, &sets.queries, &bbox, PrecisionLevels::default(), 16).unwrap();
    let db = embed_trajectories(&model, &sets.database, &bbox, PrecisionLevels::default(), 16).unwrap();
    let base = eval_msts(&q, &db, &sets.truth).unwrap();
    let rev: Vec<Vec<f64>> = db.iter().rev().cloned().collect();
    let truth: Vec<usize> = sets.truth.iter().map(|&t| db.len() - 1 - t).collect();
    let flipped = eval_msts(&q, &rev, &truth).unwrap();
    assert_eq!(base, flipped);
    assert!(base.mr >= 1.0 && base.hr1 <= base.hr5 && base.hr5 <= 1.0);
}
