//! Accuracy measures for daily totals and hourly distributions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Dataset;
use crate::predictor::{ModelError, Predictor, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("ground truth is zero; relative accuracy undefined")]
    ZeroGroundTruth,
    #[error("shape error: ground truth has {gt} values, prediction {pred}")]
    Shape { gt: usize, pred: usize },
}

/// `1 - |gt - pred| / gt`. Not clamped; large misses go negative.
pub fn accuracy_total(gt: f64, pred: f64) -> Result<f64, MetricError> {
    if gt == 0.0 {
        return Err(MetricError::ZeroGroundTruth);
    }
    Ok(1.0 - (gt - pred).abs() / gt)
}

/// `1 - sum_i |gt_i - pred_i|` over the 24 hourly shares.
pub fn accuracy_dist(gt: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    if gt.len() != pred.len() {
        return Err(MetricError::Shape {
            gt: gt.len(),
            pred: pred.len(),
        });
    }
    let l1: f64 = gt.iter().zip(pred).map(|(g, p)| (g - p).abs()).sum();
    Ok(1.0 - l1)
}

/// Median; even counts average the two middle values. NaN for empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-sample accuracy for one model output.
pub fn sample_accuracy(target: Target, gt: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    match target {
        Target::Total => {
            if gt.len() != 1 || pred.len() != 1 {
                return Err(MetricError::Shape {
                    gt: gt.len(),
                    pred: pred.len(),
                });
            }
            accuracy_total(gt[0], pred[0])
        }
        Target::Hourly => accuracy_dist(gt, pred),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: u32,
    pub gt: Vec<f64>,
    pub pred: Vec<f64>,
    /// `None` when the ground truth makes the accuracy undefined.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub target: Target,
    pub median: f64,
    pub scored: usize,
    pub excluded: usize,
    pub samples: Vec<ScoredSample>,
}

impl Scores {
    pub fn accuracies(&self) -> Vec<f64> {
        self.samples.iter().filter_map(|s| s.accuracy).collect()
    }
}

/// Scores every sample of `ds`. Samples without defined targets or with a
/// zero ground-truth total are excluded from the median and counted.
pub fn score(model: &dyn Predictor, ds: &Dataset) -> Result<Scores, ModelError> {
    let target = model.target();
    let mut samples = Vec::with_capacity(ds.len());
    let mut excluded = 0;
    for s in &ds.samples {
        let gt = target.values(s);
        let pred = model.predict(&s.env.to_vec())?;
        let accuracy = if target.usable(s) {
            sample_accuracy(target, &gt, &pred).ok()
        } else {
            None
        };
        if accuracy.is_none() {
            excluded += 1;
        }
        samples.push(ScoredSample {
            id: s.id,
            gt,
            pred,
            accuracy,
        });
    }
    let acc: Vec<f64> = samples.iter().filter_map(|s| s.accuracy).collect();
    Ok(Scores {
        target,
        median: median(&acc),
        scored: acc.len(),
        excluded,
        samples,
    })
}

pub fn median_accuracy(model: &dyn Predictor, ds: &Dataset) -> Result<f64, ModelError> {
    score(model, ds).map(|s| s.median)
}
