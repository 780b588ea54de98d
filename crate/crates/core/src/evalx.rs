//! Experiment harness: holdout, k-fold CV, cross-region transfer,
//! activity splits and per-sample error surfaces.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Dataset;
use crate::geo_grid::GeoPoint;
use crate::metrics::{median, score, ScoredSample};
use crate::nets::TrainHistory;
use crate::predictor::{ModelError, Predictor, Target};
use crate::registry::{Algorithm, FitConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {need} samples, have {have}")]
    TooFewSamples { need: usize, have: usize },
    #[error("k must be >= 2")]
    BadK,
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {msg}")]
    Write { path: String, msg: String },
}

/// Seeded shuffle of `0..n` cut into `k` folds whose sizes differ by at most one.
/// Earlier folds take the extra samples.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        out.push(idx[at..at + size].to_vec());
        at += size;
    }
    out
}

/// Seeded train/test split. The test share is `floor(n * (1 - split))`.
pub fn holdout_split(n: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // the epsilon keeps exact products such as 5991 * 0.2 from rounding down
    let n_test = ((n as f64) * (1.0 - split) + 1e-9).floor() as usize;
    let test = idx.split_off(n - n_test);
    (idx, test)
}

/// One model configuration in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub algorithm: String,
    pub target: Target,
    #[serde(default)]
    pub config: FitConfig,
}

fn fit_candidate(
    algos: &crate::registry::Registry<dyn Algorithm>,
    c: &Candidate,
    train_set: &Dataset,
    heldout: Option<&Dataset>,
) -> Result<crate::registry::Fitted, EvalError> {
    let algo = algos
        .get(&c.algorithm)
        .ok_or_else(|| EvalError::UnknownAlgorithm(c.algorithm.clone()))?;
    Ok(algo.fit(train_set, c.target, &c.config, heldout)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub label: String,
    pub algorithm: String,
    pub target: Target,
    pub fold_medians: Vec<f64>,
    /// Median over all out-of-fold accuracies.
    pub pooled_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub k: usize,
    pub seed: u64,
    pub fold_sizes: Vec<usize>,
    pub rows: Vec<CvRow>,
}

/// Every candidate sees the same seeded partition.
pub fn kfold_cv(
    ds: &Dataset,
    k: usize,
    candidates: &[Candidate],
    algos: &crate::registry::Registry<dyn Algorithm>,
    seed: u64,
) -> Result<CvTable, EvalError> {
    if k < 2 {
        return Err(EvalError::BadK);
    }
    if ds.len() < k {
        return Err(EvalError::TooFewSamples { need: k, have: ds.len() });
    }
    let folds = fold_partition(ds.len(), k, seed);
    let mut rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut fold_medians = Vec::with_capacity(k);
        let mut pooled = Vec::new();
        for (f, test_idx) in folds.iter().enumerate() {
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            let fitted = fit_candidate(algos, c, &ds.subset(&train_idx), None)?;
            let s = score(fitted.model.as_ref(), &ds.subset(test_idx))?;
            pooled.extend(s.accuracies());
            fold_medians.push(s.median);
        }
        rows.push(CvRow {
            label: c.label.clone(),
            algorithm: c.algorithm.clone(),
            target: c.target,
            fold_medians,
            pooled_median: median(&pooled),
        });
    }
    Ok(CvTable {
        k,
        seed,
        fold_sizes: folds.iter().map(Vec::len).collect(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub label: String,
    pub algorithm: String,
    pub target: Target,
    pub train_median: f64,
    pub test_median: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub split: f64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub rows: Vec<HoldoutRow>,
}

pub struct HoldoutOutcome {
    pub report: HoldoutReport,
    /// Fitted models in candidate order.
    pub models: Vec<Box<dyn Predictor>>,
}

pub fn holdout_eval(
    ds: &Dataset,
    split: f64,
    seed: u64,
    candidates: &[Candidate],
    algos: &crate::registry::Registry<dyn Algorithm>,
) -> Result<HoldoutOutcome, EvalError> {
    if ds.len() < 5 {
        return Err(EvalError::TooFewSamples { need: 5, have: ds.len() });
    }
    let (tr, te) = holdout_split(ds.len(), split, seed);
    let train_set = ds.subset(&tr);
    let test_set = ds.subset(&te);
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for c in candidates {
        let fitted = fit_candidate(algos, c, &train_set, Some(&test_set))?;
        rows.push(HoldoutRow {
            label: c.label.clone(),
            algorithm: c.algorithm.clone(),
            target: c.target,
            train_median: score(fitted.model.as_ref(), &train_set)?.median,
            test_median: score(fitted.model.as_ref(), &test_set)?.median,
            history: fitted.history,
        });
        models.push(fitted.model);
    }
    Ok(HoldoutOutcome {
        report: HoldoutReport {
            split,
            seed,
            train_size: tr.len(),
            test_size: te.len(),
            rows,
        },
        models,
    })
}

/// How the test region's features are scaled before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferNorm {
    /// Reuse the model's training-region constants.
    #[default]
    Training,
    /// Use the test region's own constants. Needs `allow_override`.
    TestRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub train_region: String,
    pub test_region: String,
    pub algorithm: String,
    pub target: Target,
    pub normalization: TransferNorm,
    pub median: f64,
    pub scored: usize,
    pub excluded: usize,
    pub samples: Vec<ScoredSample>,
}

pub fn transfer_eval(
    model: &dyn Predictor,
    train_region: &str,
    test_region: &str,
    test: &Dataset,
    norm: TransferNorm,
    allow_override: bool,
) -> Result<TransferReport, ModelError> {
    let scaled = match norm {
        TransferNorm::Training => test.renormalized(*model.norm_info()),
        TransferNorm::TestRegion if allow_override => test.clone(),
        TransferNorm::TestRegion => return Err(ModelError::NormMismatch),
    };
    let s = score(model, &scaled)?;
    Ok(TransferReport {
        train_region: train_region.to_string(),
        test_region: test_region.to_string(),
        algorithm: model.algorithm().to_string(),
        target: model.target(),
        normalization: norm,
        median: s.median,
        scored: s.scored,
        excluded: s.excluded,
        samples: s.samples,
    })
}

/// Monthly VHT threshold (hours) separating sparse from dense buffers.
pub const ACTIVITY_THRESHOLD_HOURS: f64 = 2000.0;

/// `(U, A)`: buffers whose VHT over the observation window is at most
/// `threshold_hours`, and the rest. Both keep the input normalization.
pub fn split_by_activity(ds: &Dataset, threshold_hours: f64) -> (Dataset, Dataset) {
    let days = ds.info.days as f64;
    let (u, a): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.samples[i].raw_total_vht * days <= threshold_hours);
    (ds.subset(&u), ds.subset(&a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCell {
    pub id: u32,
    pub center: GeoPoint,
    pub gt: Vec<f64>,
    pub pred: Vec<f64>,
    pub accuracy: Option<f64>,
}

/// One cell per sample, in dataset order.
pub fn error_surface(model: &dyn Predictor, ds: &Dataset) -> Result<Vec<SurfaceCell>, ModelError> {
    let s = score(model, ds)?;
    Ok(s.samples
        .into_iter()
        .zip(&ds.samples)
        .map(|(sc, smp)| SurfaceCell {
            id: sc.id,
            center: smp.center,
            gt: sc.gt,
            pred: sc.pred,
            accuracy: sc.accuracy,
        })
        .collect())
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Write {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| write_err(path, e))?;
    std::fs::write(path, s + "\n").map_err(|e| write_err(path, e))
}

/// One row per sample. Hourly targets spread over `gt_00..gt_23` and `pred_00..pred_23`.
pub fn write_scores_csv<W: Write>(w: W, target: Target, samples: &[ScoredSample]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string()];
    match target {
        Target::Total => header.extend(["gt".to_string(), "pred".to_string()]),
        Target::Hourly => {
            header.extend((0..24).map(|h| format!("gt_{h:02}")));
            header.extend((0..24).map(|h| format!("pred_{h:02}")));
        }
    }
    header.push("accuracy".into());
    wtr.write_record(&header)?;
    for s in samples {
        let mut rec = vec![s.id.to_string()];
        rec.extend(s.gt.iter().map(|v| format!("{v:?}")));
        rec.extend(s.pred.iter().map(|v| format!("{v:?}")));
        rec.push(s.accuracy.map(|a| format!("{a:?}")).unwrap_or_default());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_scores_csv(path: &Path, target: Target, samples: &[ScoredSample]) -> Result<(), EvalError> {
    let f = std::fs::File::create(path).map_err(|e| write_err(path, e))?;
    write_scores_csv(std::io::BufWriter::new(f), target, samples).map_err(|e| write_err(path, e))
}
