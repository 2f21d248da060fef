//! Fine-tuning a pretrained encoder with a small task head: travel time
//! regression and trajectory classification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, regression_metrics, ClassificationReport, RegressionReport};
use crate::batch::{bucketed_batches, make_batch, sorted_batches, Batch};
use crate::blur::PrecisionLevels;
use crate::error::{Error, Result};
use crate::geo::{BoundingBox, Trajectory};
use crate::model::layers::Mlp;
use crate::model::BlueModel;
use crate::numeric::{adam_step, AdamConfig, Gradients, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train only the head, keeping the encoder fixed.
    pub freeze_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord<M> {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(flatten)]
    pub metrics: M,
}

/// Encoder plus a two-layer MLP on the trajectory representation. The head
/// parameters live in the same store as the encoder's.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub model: BlueModel,
    pub head: Mlp,
    pub bbox: BoundingBox,
    pub precisions: PrecisionLevels,
    /// Parameters below this index belong to the encoder.
    encoder_params: usize,
}

impl TaskModel {
    pub fn new(model: &BlueModel, out_dim: usize, bbox: BoundingBox, precisions: PrecisionLevels, seed: u64) -> Self {
        let mut model = model.clone();
        let encoder_params = model.params.len();
        let d = model.config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Mlp::new(&mut model.params, "task.head", d, d, out_dim, &mut rng);
        Self {
            model,
            head,
            bbox,
            precisions,
            encoder_params,
        }
    }

    fn batch(&self, trajs: &[&Trajectory], leakage_mask: bool) -> Result<Batch> {
        let mut b = make_batch(trajs, &self.bbox, self.precisions)?;
        if leakage_mask {
            b.mask_temporal_to_first();
        }
        Ok(b)
    }

    /// Head output `[B, out_dim]`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Var {
        let enc = self.model.encode(g, batch);
        self.head.forward(g, enc.cls)
    }

    /// Raw head outputs for every trajectory, evaluation mode.
    pub fn outputs(&self, trajs: &[Trajectory], leakage_mask: bool, batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let lengths: Vec<usize> = trajs.iter().map(|t| t.points.len()).collect();
        let mut out = vec![Vec::new(); trajs.len()];
        for idx in sorted_batches(&lengths, batch_size) {
            let refs: Vec<&Trajectory> = idx.iter().map(|&i| &trajs[i]).collect();
            let batch = self.batch(&refs, leakage_mask)?;
            let mut g = Graph::new(&self.model.params);
            let y = self.forward(&mut g, &batch);
            let v = g.value(y);
            for (r, &i) in idx.iter().enumerate() {
                out[i] = v.row(r).to_vec();
            }
        }
        Ok(out)
    }

    fn train_epoch<F>(
        &mut self,
        trajs: &[&Trajectory],
        cfg: &FinetuneConfig,
        leakage_mask: bool,
        rng: &mut ChaCha8Rng,
        step: &mut u64,
        loss_fn: F,
    ) -> Result<f64>
    where
        F: Fn(&mut Graph, Var, &[usize]) -> Var,
    {
        let adam = AdamConfig::with_lr(cfg.lr);
        let lengths: Vec<usize> = trajs.iter().map(|t| t.points.len()).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, idx) in bucketed_batches(&lengths, cfg.batch_size, rng).into_iter().enumerate() {
            let refs: Vec<&Trajectory> = idx.iter().map(|&i| trajs[i]).collect();
            let batch = self.batch(&refs, leakage_mask)?;
            *step += 1;
            let grads = {
                let mut g = Graph::with_mode(&self.model.params, true, cfg.seed.wrapping_add(*step));
                let y = self.forward(&mut g, &batch);
                let loss = loss_fn(&mut g, y, &idx);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { batch: bi, value });
                }
                total += value * idx.len() as f64;
                count += idx.len();
                g.backward(loss)?
            };
            let grads = if cfg.freeze_encoder { self.head_only(&grads) } else { grads };
            adam_step(&mut self.model.params, &grads, &adam);
        }
        Ok(total / count.max(1) as f64)
    }

    fn head_only(&self, grads: &Gradients) -> Gradients {
        let mut out = Gradients::new(self.model.params.len());
        for id in self.model.params.ids().skip(self.encoder_params) {
            if let Some(t) = grads.get(id) {
                out.accumulate(id, t.clone());
            }
        }
        out
    }
}

fn check_split(train: &[Trajectory], test: &[Trajectory], cfg: &FinetuneConfig) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "fine-tuning needs non-empty train and test sets, got {} and {}",
            train.len(),
            test.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

/// Travel time in seconds: last timestamp minus first.
pub fn travel_time(t: &Trajectory) -> f64 {
    (t.points.last().unwrap().t - t.points[0].t) as f64
}

/// Travel-time regressor. Inputs only expose the departure time: every
/// point carries the first point's temporal context.
#[derive(Debug, Clone)]
pub struct TteModel {
    pub task: TaskModel,
    /// Label standardization fitted on the training split.
    pub label_mean: f64,
    pub label_std: f64,
}

impl TteModel {
    pub fn predict(&self, trajs: &[Trajectory], batch_size: usize) -> Result<Vec<f64>> {
        let out = self.task.outputs(trajs, true, batch_size)?;
        Ok(out.iter().map(|o| o[0] * self.label_std + self.label_mean).collect())
    }
}

pub struct TteOutcome {
    pub model: TteModel,
    pub history: Vec<EpochRecord<RegressionReport>>,
    pub report: RegressionReport,
}

pub fn tte_model(model: &BlueModel, bbox: BoundingBox, precisions: PrecisionLevels, train: &[Trajectory], seed: u64) -> Result<TteModel> {
    if let Some(t) = train.iter().find(|t| t.points.len() < 2) {
        return Err(Error::InvalidTrajectory(format!(
            "travel time needs at least 2 points, trajectory {:?} has {}",
            t.id,
            t.points.len()
        )));
    }
    let labels: Vec<f64> = train.iter().map(travel_time).collect();
    let n = labels.len().max(1) as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    Ok(TteModel {
        task: TaskModel::new(model, 1, bbox, precisions, seed),
        label_mean: mean,
        label_std: if var > 0.0 { var.sqrt() } else { 1.0 },
    })
}

pub fn finetune_tte(
    model: &BlueModel,
    bbox: BoundingBox,
    precisions: PrecisionLevels,
    train: &[Trajectory],
    test: &[Trajectory],
    cfg: &FinetuneConfig,
) -> Result<TteOutcome> {
    check_split(train, test, cfg)?;
    if let Some(t) = test.iter().find(|t| t.points.len() < 2) {
        return Err(Error::InvalidTrajectory(format!("test trajectory {:?} has fewer than 2 points", t.id)));
    }
    let mut tte = tte_model(model, bbox, precisions, train, cfg.seed)?;
    let targets: Vec<f64> = train
        .iter()
        .map(|t| (travel_time(t) - tte.label_mean) / tte.label_std)
        .collect();
    let truth: Vec<f64> = test.iter().map(travel_time).collect();
    let refs: Vec<&Trajectory> = train.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let train_loss = tte.task.train_epoch(&refs, cfg, true, &mut rng, &mut step, |g, y, idx| {
            let target = crate::numeric::Tensor::new([idx.len(), 1], idx.iter().map(|&i| targets[i]).collect());
            let target = g.constant(target);
            let err = g.squared_error(y, target);
            g.mean(err)
        })?;
        let report = regression_metrics(&tte.predict(test, cfg.batch_size)?, &truth)?;
        log::info!("tte epoch {epoch}: train loss {train_loss:.5}, MAE {:.3}", report.mae);
        history.push(EpochRecord {
            epoch,
            train_loss,
            metrics: report,
        });
    }
    let report = regression_metrics(&tte.predict(test, cfg.batch_size)?, &truth)?;
    Ok(TteOutcome {
        model: tte,
        history,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub task: TaskModel,
    /// Label value of each class index.
    pub classes: Vec<i64>,
}

impl Classifier {
    pub fn class_index(&self, label: i64) -> Result<usize> {
        self.classes
            .binary_search(&label)
            .map_err(|_| Error::Eval(format!("label {label} was not seen in training (classes {:?})", self.classes)))
    }

    pub fn predict(&self, trajs: &[Trajectory], batch_size: usize) -> Result<Vec<i64>> {
        let out = self.task.outputs(trajs, false, batch_size)?;
        Ok(out
            .iter()
            .map(|o| {
                let best = o
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > o[b] { i } else { b });
                self.classes[best]
            })
            .collect())
    }

    pub fn evaluate(&self, trajs: &[Trajectory], batch_size: usize) -> Result<ClassificationReport> {
        let truth = labels_of(trajs)?
            .into_iter()
            .map(|l| self.class_index(l))
            .collect::<Result<Vec<_>>>()?;
        let pred = self
            .predict(trajs, batch_size)?
            .into_iter()
            .map(|l| self.class_index(l))
            .collect::<Result<Vec<_>>>()?;
        classification_metrics(&pred, &truth, self.classes.len())
    }
}

fn labels_of(trajs: &[Trajectory]) -> Result<Vec<i64>> {
    trajs
        .iter()
        .map(|t| {
            t.label
                .ok_or_else(|| Error::InvalidTrajectory(format!("trajectory {:?} has no label", t.id)))
        })
        .collect()
}

pub struct ClassifyOutcome {
    pub model: Classifier,
    pub history: Vec<EpochRecord<ClassificationReport>>,
    pub report: ClassificationReport,
}

pub fn finetune_classify(
    model: &BlueModel,
    bbox: BoundingBox,
    precisions: PrecisionLevels,
    train: &[Trajectory],
    test: &[Trajectory],
    cfg: &FinetuneConfig,
) -> Result<ClassifyOutcome> {
    check_split(train, test, cfg)?;
    let train_labels = labels_of(train)?;
    let mut classes = train_labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "classification needs at least 2 classes in training, found {classes:?}"
        )));
    }
    let mut clf = Classifier {
        task: TaskModel::new(model, classes.len(), bbox, precisions, cfg.seed),
        classes,
    };
    let targets = train_labels
        .iter()
        .map(|&l| clf.class_index(l))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Trajectory> = train.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let train_loss = clf.task.train_epoch(&refs, cfg, false, &mut rng, &mut step, |g, y, idx| {
            let labels: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            g.cross_entropy(y, &labels)
        })?;
        let report = clf.evaluate(test, cfg.batch_size)?;
        log::info!("cls epoch {epoch}: train loss {train_loss:.5}, accuracy {:.3}", report.accuracy);
        history.push(EpochRecord {
            epoch,
            train_loss,
            metrics: report,
        });
    }
    let report = clf.evaluate(test, cfg.batch_size)?;
    Ok(ClassifyOutcome {
        model: clf,
        history,
        report,
    })
}
