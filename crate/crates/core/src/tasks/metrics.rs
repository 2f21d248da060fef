//! Regression, classification and retrieval metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub mae: f64,
    /// Mean absolute percentage error, in percent. Zero labels are skipped.
    pub mape: f64,
    pub rmse: f64,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Eval(format!(
            "regression metrics need equal non-empty inputs, got {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut pct_n = 0usize;
    for (&p, &y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y != 0.0 {
            pct += (e / y).abs();
            pct_n += 1;
        }
    }
    Ok(RegressionReport {
        mae: abs / n,
        mape: if pct_n == 0 { 0.0 } else { 100.0 * pct / pct_n as f64 },
        rmse: (sq / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Precision and F1 of class 1; only meaningful for two classes.
    pub precision: f64,
    pub f1: f64,
}

fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Confusion counts `(tp, fp, fn)` of one class.
fn counts(pred: &[usize], truth: &[usize], class: usize) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&p, &y) in pred.iter().zip(truth) {
        match (p == class, y == class) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            _ => {}
        }
    }
    c
}

/// Metrics over `n_classes` classes. Macro-F1 averages over every class.
pub fn classification_metrics(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<ClassificationReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Eval(format!(
            "classification metrics need equal non-empty inputs, got {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::Eval(format!("class {bad} outside 0..{n_classes}")));
    }
    let correct = pred.iter().zip(truth).filter(|(p, y)| p == y).count();
    let accuracy = correct as f64 / pred.len() as f64;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut macro_sum = 0.0;
    for c in 0..n_classes {
        let (a, b, d) = counts(pred, truth, c);
        tp += a;
        fp += b;
        fn_ += d;
        macro_sum += f1_score(a, b, d);
    }
    let (btp, bfp, bfn) = counts(pred, truth, 1);
    Ok(ClassificationReport {
        accuracy,
        micro_f1: f1_score(tp, fp, fn_),
        macro_f1: macro_sum / n_classes as f64,
        precision: if btp + bfp == 0 { 0.0 } else { btp as f64 / (btp + bfp) as f64 },
        f1: f1_score(btp, bfp, bfn),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mr: f64,
    pub hr1: f64,
    pub hr5: f64,
}

/// 1-based rank of `target` when `scores` are sorted descending; items
/// with equal score rank by index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count()
}

pub fn hit_ratio(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn mean_rank(ranks: &[usize]) -> f64 {
    ranks.iter().sum::<usize>() as f64 / ranks.len() as f64
}

pub fn retrieval_report(ranks: &[usize]) -> Result<RetrievalReport> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::Eval("ranks must be non-empty and 1-based".into()));
    }
    Ok(RetrievalReport {
        mr: mean_rank(ranks),
        hr1: hit_ratio(ranks, 1),
        hr5: hit_ratio(ranks, 5),
    })
}
