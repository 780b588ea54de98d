//! Reference regressors: bagged CART forests and linear epsilon-SVR.
//!
//! Both handle multi-output targets one output dimension at a time.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{Dataset, NormalizationInfo};
use crate::nets::design;
use crate::predictor::{check_input, ModelError, Predictor, SavedModel, Target, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    /// `None` grows until `min_leaf` stops it.
    #[serde(default = "default_depth")]
    pub max_depth: Option<usize>,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
    /// Fraction of features tried at each split.
    #[serde(default = "default_subsample")]
    pub feature_subsample: f64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_trees() -> usize {
    100
}
fn default_depth() -> Option<usize> {
    Some(5)
}
fn default_min_leaf() -> usize {
    5
}
fn default_subsample() -> f64 {
    1.0 / 3.0
}
fn default_bootstrap() -> bool {
    true
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: default_trees(),
            max_depth: default_depth(),
            min_leaf: default_min_leaf(),
            feature_subsample: default_subsample(),
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A regression tree stored as a flat node list; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct TreeBuilder<'a> {
    x: &'a Array2<f64>,
    y: &'a [f64],
    cfg: &'a ForestConfig,
    n_features: usize,
    nodes: Vec<Node>,
}

/// Best variance-reduction split of `idx` on `feature`: `(sse, threshold, left_count)`.
pub fn best_split_on_feature(
    x: &Array2<f64>,
    y: &[f64],
    idx: &mut [usize],
    feature: usize,
    min_leaf: usize,
) -> Option<(f64, f64, usize)> {
    idx.sort_by(|&a, &b| x[[a, feature]].total_cmp(&x[[b, feature]]).then(a.cmp(&b)));
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    let mut left = 0.0;
    let mut left_sq = 0.0;
    let mut best: Option<(f64, f64, usize)> = None;
    for k in 0..n.saturating_sub(1) {
        let yi = y[idx[k]];
        left += yi;
        left_sq += yi * yi;
        let nl = k + 1;
        let nr = n - nl;
        let xa = x[[idx[k], feature]];
        let xb = x[[idx[k + 1], feature]];
        if nl < min_leaf || nr < min_leaf || xa == xb {
            continue;
        }
        let right = total - left;
        let right_sq = total_sq - left_sq;
        let sse = (left_sq - left * left / nl as f64) + (right_sq - right * right / nr as f64);
        if best.is_none_or(|(b, _, _)| sse < b) {
            best = Some((sse, 0.5 * (xa + xb), nl));
        }
    }
    best
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let value = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf { value });
        self.nodes.len() - 1
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let at_limit = self.cfg.max_depth.is_some_and(|d| depth >= d);
        let first = self.y[idx[0]];
        let pure = idx.iter().all(|&i| self.y[i] == first);
        if at_limit || pure || idx.len() < 2 * self.cfg.min_leaf.max(1) {
            return self.leaf(idx);
        }
        let k = ((self.n_features as f64 * self.cfg.feature_subsample).round() as usize).clamp(1, self.n_features);
        let mut feats: Vec<usize> = (0..self.n_features).collect();
        if k < self.n_features {
            feats.shuffle(rng);
            feats.truncate(k);
            feats.sort_unstable();
        }
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &feats {
            if let Some((sse, thr, _)) = best_split_on_feature(self.x, self.y, idx, f, self.cfg.min_leaf.max(1)) {
                if best.is_none_or(|(b, _, _)| sse < b) {
                    best = Some((sse, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let (mut l, mut r): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[[i, feature]] <= threshold);
        let left = self.grow(&mut l, depth + 1, rng);
        let right = self.grow(&mut r, depth + 1, rng);
        self.nodes[me] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        me
    }
}

/// Grows one tree on rows `idx` of `x`.
pub fn fit_tree(x: &Array2<f64>, y: &[f64], idx: &[usize], cfg: &ForestConfig, rng: &mut ChaCha8Rng) -> Tree {
    let mut b = TreeBuilder {
        x,
        y,
        cfg,
        n_features: x.ncols(),
        nodes: Vec::new(),
    };
    let mut idx = idx.to_vec();
    b.grow(&mut idx, 0, rng);
    Tree { nodes: b.nodes }
}

/// Bagged trees for one output dimension. Tree `t` draws from its own
/// ChaCha stream so results do not depend on thread scheduling.
pub fn fit_forest_1d(x: &Array2<f64>, y: &[f64], cfg: &ForestConfig, stream_base: u64) -> Vec<Tree> {
    let n = x.nrows();
    (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream_base + t as u64);
            let idx: Vec<usize> = if cfg.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree(x, y, &idx, cfg, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub target: Target,
    pub norm_info: NormalizationInfo,
    pub config: ForestConfig,
    /// One ensemble per output dimension.
    pub forests: Vec<Vec<Tree>>,
}

pub fn train_forest(ds: &Dataset, target: Target, cfg: &ForestConfig) -> Result<ForestModel, ModelError> {
    let (x, t) = design(ds, target);
    if x.nrows() == 0 {
        return Err(ModelError::EmptyTrainingSet);
    }
    if cfg.n_trees == 0 {
        return Err(ModelError::Invalid("n_trees must be >= 1".into()));
    }
    let forests = (0..target.width())
        .map(|d| {
            let y: Vec<f64> = t.column(d).to_vec();
            fit_forest_1d(&x, &y, cfg, (d * cfg.n_trees) as u64)
        })
        .collect();
    Ok(ForestModel {
        format_version: FORMAT_VERSION,
        target,
        norm_info: ds.info,
        config: cfg.clone(),
        forests,
    })
}

impl Predictor for ForestModel {
    fn algorithm(&self) -> &'static str {
        "rf"
    }

    fn target(&self) -> Target {
        self.target
    }

    fn norm_info(&self) -> &NormalizationInfo {
        &self.norm_info
    }

    fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_input(x)?;
        Ok(self
            .forests
            .iter()
            .map(|trees| trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64)
            .collect())
    }

    fn to_saved(&self) -> SavedModel {
        SavedModel::Forest(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr / sqrt(1 + epoch)`
    #[default]
    InvSqrt,
    /// `lr / (1 + epoch / 100)`
    InvTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_c")]
    pub c_penalty: f64,
    #[serde(default = "default_svr_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_svr_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
}

fn default_epsilon() -> f64 {
    0.01
}
fn default_c() -> f64 {
    1.0
}
fn default_svr_lr() -> f64 {
    0.5
}
fn default_svr_epochs() -> usize {
    2000
}

impl Default for SvrConfig {
    fn default() -> Self {
        SvrConfig {
            epsilon: default_epsilon(),
            c_penalty: default_c(),
            learning_rate: default_svr_lr(),
            epochs: default_svr_epochs(),
            schedule: LrSchedule::InvSqrt,
            seed: 0,
        }
    }
}

/// Linear model for one output: `w . x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearUnit {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearUnit {
    pub fn eval(&self, x: ArrayView1<f64>) -> f64 {
        self.weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub format_version: u32,
    pub target: Target,
    pub norm_info: NormalizationInfo,
    pub config: SvrConfig,
    pub units: Vec<LinearUnit>,
}

/// Epsilon-insensitive loss plus L2 penalty, scaled by `1/n`:
/// `||w||^2 / (2 C n) + mean(max(0, |y - f(x)| - eps))`.
pub fn svr_objective(unit: &LinearUnit, x: &Array2<f64>, y: &[f64], cfg: &SvrConfig) -> f64 {
    let n = x.nrows() as f64;
    let reg = unit.weights.iter().map(|w| w * w).sum::<f64>() / (2.0 * cfg.c_penalty * n);
    let loss: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(r, &t)| ((t - unit.eval(r)).abs() - cfg.epsilon).max(0.0))
        .sum();
    reg + loss / n
}

/// Full-batch subgradient descent for one output. Returns the iterate with
/// the lowest objective and the per-epoch objective of the running iterate.
pub fn fit_svr_1d(x: &Array2<f64>, y: &[f64], cfg: &SvrConfig) -> Result<(LinearUnit, Vec<f64>), ModelError> {
    let n = x.nrows();
    let d = x.ncols();
    let mut unit = LinearUnit {
        weights: vec![0.0; d],
        bias: 0.0,
    };
    let mut best = unit.clone();
    let mut best_obj = svr_objective(&unit, x, y, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let lambda = 1.0 / (cfg.c_penalty * n as f64);
    for epoch in 0..cfg.epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (row, &t) in x.rows().into_iter().zip(y) {
            let r = t - unit.eval(row);
            if r.abs() > cfg.epsilon {
                let s = r.signum();
                for (g, v) in gw.iter_mut().zip(row.iter()) {
                    *g -= s * v;
                }
                gb -= s;
            }
        }
        let lr = match cfg.schedule {
            LrSchedule::Constant => cfg.learning_rate,
            LrSchedule::InvSqrt => cfg.learning_rate / (1.0 + epoch as f64).sqrt(),
            LrSchedule::InvTime => cfg.learning_rate / (1.0 + epoch as f64 / 100.0),
        };
        for (w, g) in unit.weights.iter_mut().zip(&gw) {
            *w -= lr * (lambda * *w + g / n as f64);
        }
        unit.bias -= lr * gb / n as f64;
        let obj = svr_objective(&unit, x, y, cfg);
        if !obj.is_finite() {
            return Err(ModelError::Divergence { epoch, loss: obj });
        }
        if obj < best_obj {
            best_obj = obj;
            best = unit.clone();
        }
        history.push(obj);
    }
    Ok((best, history))
}

pub fn train_svr(ds: &Dataset, target: Target, cfg: &SvrConfig) -> Result<SvrModel, ModelError> {
    if cfg.epsilon < 0.0 || cfg.c_penalty <= 0.0 {
        return Err(ModelError::Invalid("epsilon must be >= 0 and C > 0".into()));
    }
    let (x, t) = design(ds, target);
    if x.nrows() == 0 {
        return Err(ModelError::EmptyTrainingSet);
    }
    let units = (0..target.width())
        .into_par_iter()
        .map(|d| {
            let y: Vec<f64> = t.column(d).to_vec();
            fit_svr_1d(&x, &y, cfg).map(|(u, _)| u)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SvrModel {
        format_version: FORMAT_VERSION,
        target,
        norm_info: ds.info,
        config: cfg.clone(),
        units,
    })
}

impl Predictor for SvrModel {
    fn algorithm(&self) -> &'static str {
        "svr"
    }

    fn target(&self) -> Target {
        self.target
    }

    fn norm_info(&self) -> &NormalizationInfo {
        &self.norm_info
    }

    fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_input(x)?;
        let v = ArrayView1::from(x);
        Ok(self.units.iter().map(|u| u.eval(v)).collect())
    }

    fn to_saved(&self) -> SavedModel {
        SavedModel::Svr(self.clone())
    }
}
