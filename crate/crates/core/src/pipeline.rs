//! End-to-end run: synth, sample, train, cv, eval, transfer, optimize,
//! render. Each stage reads its inputs from the output directory, so any
//! stage whose outputs already exist can be skipped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalx::{
    error_surface, holdout_split, kfold_cv, save_scores_csv, split_by_activity, transfer_eval, write_json, Candidate,
    CvTable, EvalError, HoldoutReport, TransferNorm, TransferReport, ACTIVITY_THRESHOLD_HOURS,
};
use crate::features::{
    build_raw_samples, clean, load_dataset, normalize, save_dataset, CleanPolicy, Dataset, FeatureError,
};
use crate::geo_grid::{generate_centers, GeoError, GridSpec};
use crate::ingest::{parse_orders_csv_with, parse_poi_csv, IngestError, OrderPolicy, NUM_CATEGORIES};
use crate::metrics::score;
use crate::nets::{Activation, Optimizer, TrainConfig};
use crate::optimizer::{Counts, OptError, OptimizeResult, Scenario};
use crate::predictor::{load_model, save_model, ModelError, Predictor, Target};
use crate::registry::{algorithms, FitConfig, MlpOptions};
use crate::render::{curves_svg, error_map_png, heatmap_png, ramps, write_bytes, GridRaster, RenderError, Series};
use crate::synth::{gen_city, write_city, SynthError, SynthSpec};
use crate::Provenance;

pub const STAGES: [&str; 8] = ["synth", "sample", "train", "cv", "eval", "transfer", "optimize", "render"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    /// Generate the input city instead of reading `poi` and `orders`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poi: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orders: Option<PathBuf>,
    /// Length of the order window. Taken from `synth` when that is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub days: Option<u32>,
    /// Drop order rows with non-positive or over-long durations instead of failing.
    #[serde(default)]
    pub skip_invalid_orders: bool,
    #[serde(default)]
    pub clean: CleanPolicy,
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default)]
    pub seed: u64,
    pub model_t: Candidate,
    pub model_d: Candidate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvStage>,
    #[serde(default = "default_threshold")]
    pub activity_threshold_hours: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<OptimizeStage>,
    #[serde(default)]
    pub render: RenderStage,
}

fn default_split() -> f64 {
    0.8
}
fn default_threshold() -> f64 {
    ACTIVITY_THRESHOLD_HOURS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvStage {
    #[serde(default = "default_k")]
    pub k: usize,
    pub candidates: Vec<Candidate>,
}

fn default_k() -> usize {
    5
}

/// Second region scored with the region-A models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferStage {
    pub name: String,
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePick {
    /// The retained sample with the most POIs.
    Densest,
    Id(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeStage {
    /// Replaces `base_counts` with a dataset sample's counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_sample: Option<SamplePick>,
    #[serde(flatten)]
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderStage {
    #[serde(default = "default_ramp")]
    pub ramp: String,
    #[serde(default = "default_cell_px")]
    pub cell_px: usize,
    /// Held-out samples drawn in the curve figure.
    #[serde(default = "default_curves")]
    pub curves: usize,
}

fn default_ramp() -> String {
    "heat".into()
}
fn default_cell_px() -> usize {
    4
}
fn default_curves() -> usize {
    3
}

impl Default for RenderStage {
    fn default() -> Self {
        RenderStage {
            ramp: default_ramp(),
            cell_px: default_cell_px(),
            curves: default_curves(),
        }
    }
}

/// Tanh network trained with Adam, step size annealed from 1e-3 to 1e-5.
pub fn mlp_candidate(target: Target, hidden: Option<Vec<usize>>, epochs: usize) -> Candidate {
    let label = match (&hidden, target) {
        (Some(h), _) => crate::nets::MlpSpec::new(target, h.clone()).label(),
        (None, Target::Total) => "6x36".into(),
        (None, Target::Hourly) => "7x82".into(),
    };
    Candidate {
        label,
        algorithm: "mlp".into(),
        target,
        config: FitConfig {
            mlp: MlpOptions {
                hidden,
                activation: Activation::Tanh,
                init_seed: 3,
                train: TrainConfig {
                    epochs,
                    batch_size: 100,
                    learning_rate: 1e-3,
                    seed: 5,
                    shuffle: true,
                    optimizer: Optimizer::adam(),
                    eval_every: (epochs / 8).max(1),
                    lr_min: Some(1e-5),
                },
            },
            ..FitConfig::default()
        },
    }
}

impl RunConfig {
    /// Full run over the default synthetic city, with a shifted second
    /// region and a GA on the densest buffer.
    pub fn synthetic(seed: u64) -> Self {
        let spec = SynthSpec::default_city(seed);
        RunConfig {
            grid: spec.grid,
            transfer: Some(TransferStage {
                name: "B".into(),
                synth: spec.shifted(),
            }),
            synth: Some(spec),
            poi: None,
            orders: None,
            days: None,
            skip_invalid_orders: false,
            clean: CleanPolicy::default(),
            split: default_split(),
            seed,
            model_t: mlp_candidate(Target::Total, None, 800),
            model_d: mlp_candidate(Target::Hourly, None, 800),
            cv: None,
            activity_threshold_hours: default_threshold(),
            optimize: Some(OptimizeStage {
                from_sample: Some(SamplePick::Densest),
                scenario: Scenario {
                    base_counts: [0; NUM_CATEGORIES],
                    fixed_indices: [crate::optimizer::TRAFFIC_HINGE].into(),
                    delta_bound: 50,
                    fixed_total: true,
                    objective: Default::default(),
                    ga: Default::default(),
                    groups: None,
                },
            }),
            render: RenderStage::default(),
        }
    }

    /// Quick variant on the small city: short training, short GA.
    pub fn small(seed: u64) -> Self {
        let spec = SynthSpec::small_city(seed);
        let mut c = Self::synthetic(seed);
        c.grid = spec.grid;
        c.transfer = Some(TransferStage {
            name: "B".into(),
            synth: spec.shifted(),
        });
        c.synth = Some(spec);
        c.model_t = mlp_candidate(Target::Total, Some(vec![16, 16]), 60);
        c.model_d = mlp_candidate(Target::Hourly, Some(vec![24, 24]), 60);
        if let Some(o) = &mut c.optimize {
            o.scenario.ga.generations = 20;
            o.scenario.ga.population = 24;
        }
        c
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let s = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    /// Sets the run seed and derives every nested seed from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(s) = &mut self.synth {
            s.seed = seed;
        }
        if let Some(t) = &mut self.transfer {
            t.synth.seed = seed.wrapping_add(1_000_003);
        }
        for (k, c) in [&mut self.model_t, &mut self.model_d].into_iter().enumerate() {
            let base = seed.wrapping_mul(16).wrapping_add(k as u64 * 4);
            c.config.mlp.init_seed = base;
            c.config.mlp.train.seed = base + 1;
            c.config.rf.seed = base + 2;
            c.config.svr.seed = base + 3;
        }
        if let Some(o) = &mut self.optimize {
            o.scenario.ga.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Err(e) = self.grid.validate() {
            return bad(format!("grid: {e}"));
        }
        match (&self.synth, &self.poi, &self.orders) {
            (Some(s), None, None) => {
                if let Err(e) = s.validate() {
                    return bad(format!("synth: {e}"));
                }
            }
            (None, Some(_), Some(_)) => {
                if self.days.unwrap_or(0) == 0 {
                    return bad("days: required and positive when reading poi/orders".into());
                }
            }
            _ => return bad("input: set either `synth` or both `poi` and `orders`".into()),
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split: {} is not in (0, 1)", self.split));
        }
        if self.model_t.target != Target::Total {
            return bad("model_t: target must be T".into());
        }
        if self.model_d.target != Target::Hourly {
            return bad("model_d: target must be D".into());
        }
        let algos = algorithms();
        let mut cands = vec![&self.model_t, &self.model_d];
        if let Some(cv) = &self.cv {
            if cv.k < 2 {
                return bad("cv.k: must be >= 2".into());
            }
            cands.extend(&cv.candidates);
        }
        for c in cands {
            if algos.get(&c.algorithm).is_none() {
                return bad(format!("algorithm `{}` is not registered ({})", c.algorithm, algos.names().join(", ")));
            }
        }
        if let Some(t) = &self.transfer {
            if let Err(e) = t.synth.validate() {
                return bad(format!("transfer.synth: {e}"));
            }
        }
        if let Some(o) = &self.optimize {
            let mut sc = o.scenario.clone();
            if o.from_sample.is_some() {
                sc.base_counts = [1; NUM_CATEGORIES];
            }
            if let Err(e) = sc.validate() {
                return bad(format!("optimize: {e}"));
            }
        }
        if ramps().get(&self.render.ramp).is_none() {
            return bad(format!("render.ramp: unknown ramp `{}`", self.render.ramp));
        }
        if self.render.cell_px == 0 {
            return bad("render.cell_px: must be >= 1".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        crate::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    fn days(&self) -> u32 {
        self.synth.as_ref().map_or(self.days.unwrap_or(0), |s| s.n_days)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Other(String),
}

impl StageError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            StageError::Model(ModelError::Divergence { .. })
                | StageError::Eval(EvalError::Model(ModelError::Divergence { .. }))
                | StageError::Opt(OptError::Model(ModelError::Divergence { .. }))
        )
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    /// 1 for bad configuration, 3 for numeric divergence, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Stage { source, .. } if source.is_divergence() => 3,
            PipelineError::Stage { .. } => 2,
        }
    }
}

/// A report with the run's provenance attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub centers: usize,
    pub retained: usize,
    pub removed_no_poi: usize,
    pub removed_low_activity: usize,
    pub rejected_orders: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub target: Target,
    pub label: String,
    pub test_median: f64,
    pub scored: usize,
    pub excluded: usize,
    /// Held-out buffers at or below the activity threshold.
    pub sparse_median: Option<f64>,
    pub sparse_count: usize,
    pub dense_median: Option<f64>,
    pub dense_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_size: usize,
    pub activity_threshold_hours: f64,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub region: String,
    pub samples: usize,
    /// Median held-out accuracy in the training region, T then D.
    pub home_medians: Vec<f64>,
    pub reports: Vec<TransferReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Provenance,
    pub stages: Vec<StageRecord>,
}

/// Output files of each stage, relative to the run directory.
pub fn stage_outputs(stage: &str) -> &'static [&'static str] {
    match stage {
        "synth" => &["synth/poi.csv", "synth/orders.csv", "synth/truth.json"],
        "sample" => &["dataset.csv", "dataset.norm.json", "sample.json"],
        "train" => &["model_t.json", "model_d.json", "holdout.json"],
        "cv" => &["cv.json"],
        "eval" => &["eval.json", "scores_t.csv", "scores_d.csv"],
        "transfer" => &["transfer.json", "transfer/dataset.csv", "transfer/dataset.norm.json"],
        "optimize" => &["optimize.json"],
        "render" => &[
            "maps/density.png",
            "maps/vht.png",
            "maps/error_t.png",
            "maps/error_d.png",
            "curves.svg",
        ],
        _ => &[],
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    provenance: Provenance,
}

type StageResult<T> = Result<T, StageError>;

fn other(e: impl std::fmt::Display) -> StageError {
    StageError::Other(e.to_string())
}

fn mkdirs(path: &Path) -> StageResult<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| other(format!("{}: {e}", d.display())))?;
    }
    Ok(())
}

impl Pipeline {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>, force: bool) -> Result<Self, PipelineError> {
        config.validate()?;
        let provenance = config.provenance();
        Ok(Pipeline {
            config,
            out: out.into(),
            force,
            provenance,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn enabled(&self, stage: &str) -> bool {
        match stage {
            "synth" => self.config.synth.is_some(),
            "cv" => self.config.cv.is_some(),
            "transfer" => self.config.transfer.is_some(),
            "optimize" => self.config.optimize.is_some(),
            _ => true,
        }
    }

    fn stamp<T: Serialize>(&self, rel: &str, body: T) -> StageResult<()> {
        let p = self.path(rel);
        mkdirs(&p)?;
        write_json(
            &p,
            &Stamped {
                provenance: self.provenance.clone(),
                body,
            },
        )?;
        Ok(())
    }

    /// Runs every enabled stage in order. A stage whose outputs all exist
    /// is skipped unless `force` is set.
    pub fn run(&self) -> Result<Manifest, PipelineError> {
        fs::create_dir_all(&self.out).map_err(|e| PipelineError::Stage {
            stage: "setup",
            source: other(format!("{}: {e}", self.out.display())),
        })?;
        write_json(&self.path("config.json"), &self.config).map_err(|e| PipelineError::Stage {
            stage: "setup",
            source: e.into(),
        })?;
        let mut stages = Vec::new();
        for stage in STAGES {
            let outputs = stage_outputs(stage);
            let status = if !self.enabled(stage) {
                StageStatus::Disabled
            } else if !self.force && outputs.iter().all(|o| self.path(o).exists()) {
                StageStatus::Skipped
            } else {
                self.run_stage(stage).map_err(|source| PipelineError::Stage { stage, source })?;
                StageStatus::Ran
            };
            stages.push(StageRecord {
                stage: stage.to_string(),
                status,
                outputs: outputs.iter().map(|s| s.to_string()).collect(),
            });
        }
        let manifest = Manifest {
            provenance: self.provenance.clone(),
            stages,
        };
        write_json(&self.path("manifest.json"), &manifest).map_err(|e| PipelineError::Stage {
            stage: "manifest",
            source: e.into(),
        })?;
        Ok(manifest)
    }

    pub fn run_stage(&self, stage: &str) -> StageResult<()> {
        match stage {
            "synth" => self.stage_synth(),
            "sample" => self.stage_sample(),
            "train" => self.stage_train(),
            "cv" => self.stage_cv(),
            "eval" => self.stage_eval(),
            "transfer" => self.stage_transfer(),
            "optimize" => self.stage_optimize(),
            "render" => self.stage_render(),
            _ => Err(other(format!("unknown stage `{stage}`"))),
        }
    }

    fn stage_synth(&self) -> StageResult<()> {
        let spec = self.config.synth.as_ref().ok_or_else(|| other("no synth spec"))?;
        let city = gen_city(spec)?;
        write_city(&city, &self.path("synth"))?;
        Ok(())
    }

    fn inputs(&self) -> (PathBuf, PathBuf) {
        match (&self.config.poi, &self.config.orders) {
            (Some(p), Some(o)) => (p.clone(), o.clone()),
            _ => (self.path("synth/poi.csv"), self.path("synth/orders.csv")),
        }
    }

    fn stage_sample(&self) -> StageResult<()> {
        let (poi_path, order_path) = self.inputs();
        let policy = if self.config.skip_invalid_orders {
            OrderPolicy::SkipInvalid
        } else {
            OrderPolicy::Strict
        };
        let pois = parse_poi_csv(&poi_path)?;
        let parsed = parse_orders_csv_with(&order_path, policy)?;
        let (ds, mut report) = sample_dataset(&self.config.grid, &pois, &parsed.orders, self.config.days(), &self.config.clean)?;
        report.rejected_orders = parsed.rejected_non_positive + parsed.rejected_too_long;
        save_dataset(&self.path("dataset.csv"), &ds, Some(self.provenance.clone()))?;
        self.stamp("sample.json", report)
    }

    fn dataset(&self) -> StageResult<Dataset> {
        Ok(load_dataset(&self.path("dataset.csv"))?)
    }

    /// `(train, test)` under the configured split.
    fn split(&self, ds: &Dataset) -> (Dataset, Dataset) {
        let (tr, te) = holdout_split(ds.len(), self.config.split, self.config.seed);
        (ds.subset(&tr), ds.subset(&te))
    }

    fn models(&self) -> StageResult<(Box<dyn Predictor>, Box<dyn Predictor>)> {
        Ok((load_model(&self.path("model_t.json"))?, load_model(&self.path("model_d.json"))?))
    }

    fn stage_train(&self) -> StageResult<()> {
        let ds = self.dataset()?;
        let cands = [self.config.model_t.clone(), self.config.model_d.clone()];
        let out = crate::evalx::holdout_eval(&ds, self.config.split, self.config.seed, &cands, &algorithms())?;
        for (m, name) in out.models.iter().zip(["model_t.json", "model_d.json"]) {
            save_model(&self.path(name), m.as_ref(), Some(self.provenance.clone()))?;
        }
        self.stamp::<HoldoutReport>("holdout.json", out.report)
    }

    fn stage_cv(&self) -> StageResult<()> {
        let cv = self.config.cv.as_ref().ok_or_else(|| other("no cv config"))?;
        let ds = self.dataset()?;
        let (train_set, _) = self.split(&ds);
        let table = kfold_cv(&train_set, cv.k, &cv.candidates, &algorithms(), self.config.seed)?;
        self.stamp::<CvTable>("cv.json", table)
    }

    fn stage_eval(&self) -> StageResult<()> {
        let ds = self.dataset()?;
        let (_, test) = self.split(&ds);
        let (mt, md) = self.models()?;
        let (sparse, dense) = split_by_activity(&test, self.config.activity_threshold_hours);
        let mut rows = Vec::new();
        for (m, label, csv) in [
            (mt.as_ref(), &self.config.model_t.label, "scores_t.csv"),
            (md.as_ref(), &self.config.model_d.label, "scores_d.csv"),
        ] {
            let s = score(m, &test)?;
            save_scores_csv(&self.path(csv), m.target(), &s.samples)?;
            let part = |d: &Dataset| -> StageResult<Option<f64>> {
                Ok(if d.is_empty() { None } else { Some(score(m, d)?.median).filter(|v| v.is_finite()) })
            };
            rows.push(EvalRow {
                target: m.target(),
                label: label.clone(),
                test_median: s.median,
                scored: s.scored,
                excluded: s.excluded,
                sparse_median: part(&sparse)?,
                sparse_count: sparse.len(),
                dense_median: part(&dense)?,
                dense_count: dense.len(),
            });
        }
        self.stamp(
            "eval.json",
            EvalReport {
                test_size: test.len(),
                activity_threshold_hours: self.config.activity_threshold_hours,
                rows,
            },
        )
    }

    fn stage_transfer(&self) -> StageResult<()> {
        let t = self.config.transfer.as_ref().ok_or_else(|| other("no transfer config"))?;
        let city = gen_city(&t.synth)?;
        let (b, _) = sample_dataset(&t.synth.grid, &city.pois, &city.orders, t.synth.n_days, &self.config.clean)?;
        let p = self.path("transfer/dataset.csv");
        mkdirs(&p)?;
        save_dataset(&p, &b, Some(self.provenance.clone()))?;
        let ds = self.dataset()?;
        let (_, test) = self.split(&ds);
        let (mt, md) = self.models()?;
        let mut reports = Vec::new();
        let mut home = Vec::new();
        for m in [mt.as_ref(), md.as_ref()] {
            home.push(score(m, &test)?.median);
            reports.push(transfer_eval(m, "A", &t.name, &b, TransferNorm::Training, false)?);
        }
        self.stamp(
            "transfer.json",
            TransferSummary {
                region: t.name.clone(),
                samples: b.len(),
                home_medians: home,
                reports,
            },
        )
    }

    fn stage_optimize(&self) -> StageResult<()> {
        let o = self.config.optimize.as_ref().ok_or_else(|| other("no optimize config"))?;
        let mut sc = o.scenario.clone();
        if let Some(pick) = &o.from_sample {
            let ds = self.dataset()?;
            sc.base_counts = pick_counts(&ds, pick)?;
        }
        let (mt, md) = self.models()?;
        let res = sc.run(mt.as_ref(), md.as_ref())?;
        #[derive(Serialize)]
        struct Body<'a> {
            scenario: &'a Scenario,
            #[serde(flatten)]
            result: OptimizeResult,
        }
        self.stamp(
            "optimize.json",
            Body {
                scenario: &sc,
                result: res,
            },
        )
    }

    fn stage_render(&self) -> StageResult<()> {
        let r = &self.config.render;
        let ramp = ramps().get(&r.ramp).ok_or_else(|| other(format!("unknown ramp `{}`", r.ramp)))?;
        let hash = Some(self.provenance.config_hash.as_str());
        let ds = self.dataset()?;
        let grid = &self.config.grid;
        let density = GridRaster::from_points(grid, ds.samples.iter().map(|s| (s.center, s.counts.iter().sum::<u32>() as f64)))?;
        let vht = GridRaster::from_points(grid, ds.samples.iter().map(|s| (s.center, s.raw_total_vht)))?;
        write_bytes(&self.path("maps/density.png"), &heatmap_png(&density, &ramp, r.cell_px, hash)?)?;
        write_bytes(&self.path("maps/vht.png"), &heatmap_png(&vht, &ramp, r.cell_px, hash)?)?;
        let (mt, md) = self.models()?;
        for (m, name) in [(mt.as_ref(), "maps/error_t.png"), (md.as_ref(), "maps/error_d.png")] {
            let surface = error_surface(m, &ds)?;
            write_bytes(&self.path(name), &error_map_png(&surface, grid, r.cell_px, hash)?)?;
        }
        let (_, test) = self.split(&ds);
        let mut series = Vec::new();
        for s in test.samples.iter().filter(|s| s.has_demand()).take(r.curves) {
            let pred = md.predict(&s.env.to_vec())?;
            series.push(Series {
                label: format!("ST{} truth", s.id),
                values: s.demand.hourly.to_vec(),
                faded: true,
            });
            series.push(Series {
                label: format!("ST{} predicted", s.id),
                values: pred,
                faded: false,
            });
        }
        let title = format!("Hourly shares, run {}", &self.provenance.config_hash[..12]);
        let svg = curves_svg(&series, &title)?;
        let svg = svg.replacen(
            "<rect",
            &format!(
                "<!-- config_hash={} seed={} -->\n<rect",
                self.provenance.config_hash, self.provenance.seed
            ),
            1,
        );
        write_bytes(&self.path("curves.svg"), svg.as_bytes())?;
        Ok(())
    }
}

/// Buffers on `grid`, cleaned and normalized.
pub fn sample_dataset(
    grid: &GridSpec,
    pois: &[crate::ingest::PoiRecord],
    orders: &[crate::ingest::TripOrder],
    days: u32,
    policy: &CleanPolicy,
) -> StageResult<(Dataset, SampleReport)> {
    let centers = generate_centers(grid)?;
    let raw = build_raw_samples(&centers, pois, orders, grid, days)?;
    let kept = clean(raw, policy)?;
    let ds = normalize(&kept.samples)?;
    let report = SampleReport {
        centers: centers.len(),
        retained: ds.len(),
        removed_no_poi: kept.removed_no_poi,
        removed_low_activity: kept.removed_low_activity,
        rejected_orders: 0,
    };
    Ok((ds, report))
}

pub fn pick_counts(ds: &Dataset, pick: &SamplePick) -> StageResult<Counts> {
    let s = match pick {
        SamplePick::Densest => ds
            .samples
            .iter()
            .max_by_key(|s| (s.counts.iter().sum::<u32>(), std::cmp::Reverse(s.id))),
        SamplePick::Id(id) => ds.get(*id),
    }
    .ok_or_else(|| other(format!("no sample for {pick:?}")))?;
    let mut c = [0i64; NUM_CATEGORIES];
    for (o, &v) in c.iter_mut().zip(&s.counts) {
        *o = v as i64;
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::synthetic(7);
        assert_eq!(a.hash(), RunConfig::synthetic(7).hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.apply_seed(8);
        assert_ne!(a.hash(), b.hash());
        let back = RunConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(back.hash(), a.hash());
    }

    #[test]
    fn missing_grid_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::synthetic(1).to_json()).unwrap();
        v.as_object_mut().unwrap().remove("grid");
        let e = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("`grid`"), "{e}");
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let mut c = RunConfig::synthetic(1);
        c.poi = Some("x.csv".into());
        assert!(c.validate().is_err());
        let mut c = RunConfig::synthetic(1);
        c.model_t.algorithm = "gbm".into();
        assert!(c.validate().unwrap_err().to_string().contains("gbm"));
        let mut c = RunConfig::synthetic(1);
        c.render.ramp = "plasma".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::synthetic(1);
        c.optimize.as_mut().unwrap().scenario.delta_bound = -1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn divergence_maps_to_exit_3() {
        let e = PipelineError::Stage {
            stage: "train",
            source: StageError::Eval(EvalError::Model(ModelError::Divergence { epoch: 2, loss: f64::NAN })),
        };
        assert_eq!(e.exit_code(), 3);
        let e = PipelineError::Stage {
            stage: "sample",
            source: StageError::Other("x".into()),
        };
        assert_eq!(e.exit_code(), 2);
    }
}
