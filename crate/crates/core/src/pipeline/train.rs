//! Reconstruction pretraining, checkpoints and the model card.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::batch::{bucketed_batches, make_batch, sorted_batches, Batch};
use crate::blur::PrecisionLevels;
use crate::error::{Error, Result};
use crate::geo::{BoundingBox, Trajectory};
use crate::model::{BlueModel, ModelConfig};
use crate::numeric::{adam_step, load_checkpoint, read_checkpoint, save_checkpoint, AdamConfig, Gradients, Graph};

/// Everything needed to rebuild a trained encoder and feed it new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: ModelConfig,
    /// Normalizer fitted on the training split.
    pub bbox: BoundingBox,
    pub precisions: PrecisionLevels,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub best_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: BlueModel,
    pub card: ModelCard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters of the best epoch.
    pub best: Pretrained,
    pub history: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Seeded shuffle split into train/validation/test by the given fractions.
pub fn split_dataset(trajs: &[Trajectory], fractions: [f64; 3], seed: u64) -> [Vec<Trajectory>; 3] {
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = trajs.len() as f64;
    let n_train = (fractions[0] * n).round() as usize;
    let n_val = ((fractions[1] * n).round() as usize).min(trajs.len() - n_train.min(trajs.len()));
    let n_train = n_train.min(trajs.len());
    let pick = |r: std::ops::Range<usize>| order[r].iter().map(|&i| trajs[i].clone()).collect();
    [
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..trajs.len()),
    ]
}

/// Build the batches for `plan` on a producer thread (with `workers`
/// threads) and hand them to `consume` in order.
fn stream_batches<F>(
    trajs: &[Trajectory],
    plan: &[Vec<usize>],
    bbox: &BoundingBox,
    precisions: PrecisionLevels,
    workers: usize,
    mut consume: F,
) -> Result<()>
where
    F: FnMut(usize, &[usize], Batch) -> Result<()>,
{
    let build = |idx: &Vec<usize>| {
        let refs: Vec<&Trajectory> = idx.iter().map(|&i| &trajs[i]).collect();
        make_batch(&refs, bbox, precisions)
    };
    if workers <= 1 {
        for (i, idx) in plan.iter().enumerate() {
            consume(i, idx, build(idx)?)?;
        }
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let (tx, rx) = sync_channel::<Result<Batch>>(workers * 2);
    std::thread::scope(|s| {
        s.spawn(move || {
            for chunk in plan.chunks(workers) {
                let built: Vec<Result<Batch>> = pool.install(|| chunk.par_iter().map(build).collect());
                for b in built {
                    if tx.send(b).is_err() {
                        return;
                    }
                }
            }
        });
        for (i, idx) in plan.iter().enumerate() {
            let batch = rx.recv().expect("producer sends one batch per plan entry")?;
            consume(i, idx, batch)?;
        }
        Ok(())
    })
}

/// Mean per-trajectory reconstruction loss without dropout.
pub fn evaluate_loss(model: &BlueModel, trajs: &[Trajectory], bbox: &BoundingBox, precisions: PrecisionLevels, batch_size: usize) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::InsufficientData("no trajectories to evaluate".into()));
    }
    let lengths: Vec<usize> = trajs.iter().map(|t| t.points.len()).collect();
    let mut total = 0.0;
    for idx in sorted_batches(&lengths, batch_size) {
        let refs: Vec<&Trajectory> = idx.iter().map(|&i| &trajs[i]).collect();
        let batch = make_batch(&refs, bbox, precisions)?;
        let per = model.per_trajectory_loss(&batch);
        total += if model.config.per_point_mean {
            per.iter().zip(&batch.level_lens[0]).map(|(l, &n)| l / n as f64).sum::<f64>()
        } else {
            per.iter().sum::<f64>()
        };
    }
    Ok(total / trajs.len() as f64)
}

/// Pretrain on `train`, selecting the epoch with the lowest validation loss
/// (training loss when `val` is empty).
pub fn pretrain(
    train: &[Trajectory],
    val: &[Trajectory],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    d_max: f64,
    precisions: PrecisionLevels,
) -> Result<PretrainOutcome> {
    train_cfg.validate()?;
    precisions.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("training split is empty".into()));
    }
    let bbox = BoundingBox::fit(train, d_max)?;
    let mut model = BlueModel::new(model_cfg.clone(), train_cfg.seed)?;
    log::info!(
        "pretraining {} parameters on {} trajectories ({} validation)",
        model.params.numel(),
        train.len(),
        val.len()
    );
    let adam = AdamConfig::with_lr(train_cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed);
    let lengths: Vec<usize> = train.iter().map(|t| t.points.len()).collect();
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, BlueModel)> = None;
    let mut step: u64 = 0;

    for epoch in 1..=train_cfg.epochs {
        let batches = bucketed_batches(&lengths, train_cfg.batch_size, &mut rng);
        // chunk `c` belongs to batch `owner[c]`; `last[c]` closes it
        let mut plan = Vec::new();
        let mut owner = Vec::new();
        let mut last = Vec::new();
        for (bi, mut idx) in batches.iter().cloned().enumerate() {
            idx.sort_by_key(|&i| lengths[i]);
            let n = idx.len().div_ceil(train_cfg.micro_batch);
            for (ci, chunk) in idx.chunks(train_cfg.micro_batch).enumerate() {
                plan.push(chunk.to_vec());
                owner.push(bi);
                last.push(ci + 1 == n);
            }
        }
        let mut weighted = 0.0;
        let mut acc: Option<Gradients> = None;
        let mut batch_loss = 0.0;
        stream_batches(train, &plan, &bbox, precisions, train_cfg.workers, |ci, idx, batch| {
            let bi = owner[ci];
            let share = idx.len() as f64 / batches[bi].len() as f64;
            let seed = train_cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step + 1) ^ ((ci as u64) << 40);
            let grads = {
                let mut g = Graph::with_mode(&model.params, true, seed);
                let loss = model.loss(&mut g, &batch);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    log::error!("epoch {epoch}: loss {value} on batch {bi} (first trajectory {:?})", batch.ids[0]);
                    return Err(Error::NonFiniteLoss { batch: bi, value });
                }
                batch_loss += share * value;
                let scaled = g.scale(loss, share);
                g.backward(scaled)?
            };
            match &mut acc {
                Some(a) => a.merge(grads),
                None => acc = Some(grads),
            }
            if last[ci] {
                step += 1;
                step_losses.push(batch_loss);
                weighted += batch_loss * batches[bi].len() as f64;
                batch_loss = 0.0;
                adam_step(&mut model.params, &acc.take().expect("chunk gradients"), &adam);
            }
            Ok(())
        })?;
        let train_loss = weighted / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, val, &bbox, precisions, train_cfg.batch_size)?)
        };
        match val_loss {
            Some(v) => log::info!("epoch {epoch}: train loss {train_loss:.6}, val loss {v:.6}"),
            None => log::info!("epoch {epoch}: train loss {train_loss:.6}"),
        }
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.clone()));
        }
    }

    let (best_loss, best_epoch, best_model) = best.unwrap_or((f64::NAN, 0, model));
    Ok(PretrainOutcome {
        best: Pretrained {
            card: ModelCard {
                model: model_cfg.clone(),
                bbox,
                precisions,
                train: train_cfg.clone(),
                best_epoch,
                best_loss,
            },
            model: best_model,
        },
        history,
        step_losses,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochLog]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "epoch,train_loss,val_loss").map_err(io)?;
    for h in history {
        let val = h.val_loss.map_or(String::new(), |v| v.to_string());
        writeln!(w, "{},{},{}", h.epoch, h.train_loss, val).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_pretrained(path: &Path, p: &Pretrained) -> Result<()> {
    save_checkpoint(path, &p.model.params, &p.card.model.hash(), serde_json::to_value(&p.card)?)
}

pub fn load_pretrained(path: &Path) -> Result<Pretrained> {
    let (header, _) = read_checkpoint(path)?;
    let card: ModelCard = serde_json::from_value(header.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: model card unreadable: {e}", path.display())))?;
    if card.model.hash() != header.config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: config hash {} does not match the stored model card",
            path.display(),
            header.config_hash
        )));
    }
    let mut model = BlueModel::new(card.model.clone(), 0)?;
    load_checkpoint(path, &mut model.params)?;
    Ok(Pretrained { model, card })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Pooling;
    use crate::pipeline::synth::{generate_synthetic, SyntheticSpec};

    fn corpus(n: usize, seed: u64) -> Vec<Trajectory> {
        generate_synthetic(&SyntheticSpec {
            n,
            seed,
            min_points: 8,
            max_points: 16,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            layers: [1, 1, 1],
            dropout: 0.1,
            pooling: Pooling::Attention,
            levels: vec![1, 2, 3],
            ffn_mult: 2,
            per_point_mean: false,
        }
    }

    fn train_cfg(epochs: usize, workers: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr: 1e-3,
            epochs,
            seed: 3,
            workers,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_is_seeded_and_exhaustive() {
        let c = corpus(50, 1);
        let [a, b, t] = split_dataset(&c, [0.6, 0.2, 0.2], 7);
        assert_eq!((a.len(), b.len(), t.len()), (30, 10, 10));
        let mut ids: Vec<String> = a.iter().chain(&b).chain(&t).map(|t| t.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 50);
        assert_eq!(split_dataset(&c, [0.6, 0.2, 0.2], 7)[0], a);
        assert_ne!(split_dataset(&c, [0.6, 0.2, 0.2], 8)[0], a);
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let c = corpus(12, 2);
        let (tr, va) = (&c[..8], &c[8..]);
        let a = pretrain(tr, va, &tiny(), &train_cfg(2, 1), 1000.0, PrecisionLevels::default()).unwrap();
        let b = pretrain(tr, va, &tiny(), &train_cfg(2, 2), 1000.0, PrecisionLevels::default()).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.history, b.history);
        for (p, q) in a.best.model.params.iter().zip(b.best.model.params.iter()) {
            assert_eq!(p.tensor, q.tensor);
        }
    }

    #[test]
    fn chunked_batches_give_the_full_batch_update() {
        let c = corpus(12, 8);
        let cfg = ModelConfig { dropout: 0.0, ..tiny() };
        let run = |micro_batch| {
            let t = TrainConfig {
                batch_size: 12,
                micro_batch,
                ..train_cfg(2, 1)
            };
            pretrain(&c, &[], &cfg, &t, 1000.0, PrecisionLevels::default()).unwrap()
        };
        let (whole, chunked) = (run(12), run(5));
        for (a, b) in whole.step_losses.iter().zip(&chunked.step_losses) {
            assert!((a - b).abs() <= 1e-12 * a.abs());
        }
        for (p, q) in whole.best.model.params.iter().zip(chunked.best.model.params.iter()) {
            for (x, y) in p.tensor.data().iter().zip(q.tensor.data()) {
                assert!((x - y).abs() <= 1e-9, "{}: {x} vs {y}", p.name);
            }
        }
    }

    #[test]
    fn validation_loss_ignores_dropout() {
        let c = corpus(6, 3);
        let model = BlueModel::new(tiny(), 1).unwrap();
        let bbox = BoundingBox::fit(&c, 1000.0).unwrap();
        let a = evaluate_loss(&model, &c, &bbox, PrecisionLevels::default(), 4).unwrap();
        let b = evaluate_loss(&model, &c, &bbox, PrecisionLevels::default(), 4).unwrap();
        assert_eq!(a, b);
        let refs: Vec<&Trajectory> = c.iter().collect();
        let batch = make_batch(&refs, &bbox, PrecisionLevels::default()).unwrap();
        let mut g = Graph::new(&model.params);
        let l = model.loss(&mut g, &batch);
        assert!((g.value(l).item() - a).abs() < 1e-9 * a);
    }

    #[test]
    fn checkpoint_round_trip_restores_the_model() {
        let c = corpus(10, 4);
        let out = pretrain(&c[..6], &c[6..], &tiny(), &train_cfg(2, 1), 1000.0, PrecisionLevels::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_pretrained(&path, &out.best).unwrap();
        let back = load_pretrained(&path).unwrap();
        assert_eq!(back.card, out.best.card);
        let refs: Vec<&Trajectory> = c.iter().collect();
        let batch = make_batch(&refs, &back.card.bbox, back.card.precisions).unwrap();
        assert_eq!(back.model.embed(&batch), out.best.model.embed(&batch));

        let csv = dir.path().join("h.csv");
        write_history_csv(&csv, &out.history).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,train_loss,val_loss\n1,"));
    }

    #[test]
    fn best_epoch_has_lowest_validation_loss() {
        let c = corpus(14, 5);
        let out = pretrain(&c[..10], &c[10..], &tiny(), &train_cfg(4, 1), 1000.0, PrecisionLevels::default()).unwrap();
        let min = out
            .history
            .iter()
            .map(|h| h.val_loss.unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.card.best_loss, min);
        assert_eq!(out.history[out.best.card.best_epoch - 1].val_loss, Some(min));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let c = corpus(4, 6);
        let mut cfg = train_cfg(1, 1);
        cfg.lr = 1e300;
        cfg.epochs = 3;
        let err = pretrain(&c, &[], &tiny(), &cfg, 1000.0, PrecisionLevels::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }
}
