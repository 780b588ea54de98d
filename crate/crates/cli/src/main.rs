//! `urbanflux`: each pipeline stage as a subcommand, plus `run` for the
//! whole chain and `serve` for the HTTP API.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric divergence. Failures
//! also print one JSON line on stderr.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use urbanflux_core::evalx::{
    error_surface, holdout_split, kfold_cv, save_scores_csv, split_by_activity, transfer_eval, write_json, Candidate,
    EvalError, TransferNorm, ACTIVITY_THRESHOLD_HOURS,
};
use urbanflux_core::features::{load_dataset, save_dataset, CleanPolicy, Dataset};
use urbanflux_core::geo_grid::{GeoPoint, GridSpec};
use urbanflux_core::ingest::{observed_days, parse_orders_csv_with, parse_poi_csv, OrderPolicy, NUM_CATEGORIES};
use urbanflux_core::metrics::score;
use urbanflux_core::nets::{Activation, MlpSpec, Optimizer};
use urbanflux_core::optimizer::{default_groups, predict_counts, what_if, Counts, Edit, OptError, Scenario};
use urbanflux_core::pipeline::{mlp_candidate, sample_dataset, Pipeline, PipelineError, RunConfig, StageError};
use urbanflux_core::predictor::{load_model, save_model, ModelError, Predictor, Target};
use urbanflux_core::registry::{algorithms, FitConfig};
use urbanflux_core::render::{curves_svg, error_map_png, heatmap_png, ramps, write_bytes, GridRaster, Series};
use urbanflux_core::synth::{gen_city, write_city, SynthSpec};
use urbanflux_core::{sha256_hex, Provenance};
use urbanflux_service::ServiceConfig;

#[derive(Parser, Debug)]
#[command(name = "urbanflux", version, about = "Urban function mix to vehicle travel demand")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Rerun `run` stages whose outputs already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic city: poi.csv, orders.csv, truth.json.
    Synth(SynthArgs),
    /// Aggregate POIs and orders into a normalized buffer dataset.
    Sample(SampleArgs),
    /// Fit one model and save it as JSON.
    Train(TrainArgs),
    /// k-fold cross-validation over several model shapes.
    Cv(CvArgs),
    /// Score a model on a dataset.
    Eval(EvalArgs),
    /// Score a model on another region's dataset.
    Transfer(TransferArgs),
    /// Predict demand for one count vector, optionally with edits.
    Predict(PredictArgs),
    /// Search counts with the genetic algorithm.
    Optimize(OptimizeArgs),
    /// Heatmaps, error maps and demand curves.
    Render(RenderArgs),
    /// Start the HTTP API.
    Serve(ServeArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// `default` or `small`.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Full spec as JSON; overrides `--preset`.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Generate the shifted neighbour of the chosen city.
    #[arg(long)]
    shifted: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    poi: PathBuf,
    #[arg(long)]
    orders: PathBuf,
    /// `min_lon,min_lat,max_lon,max_lat`
    #[arg(long)]
    bbox: String,
    #[arg(long, default_value_t = 200.0)]
    step: f64,
    #[arg(long, default_value_t = 1000.0)]
    radius: f64,
    /// Length of the order window; inferred from pickup times if absent.
    #[arg(long)]
    days: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    min_orders_per_hour: f64,
    /// Drop invalid order rows instead of failing.
    #[arg(long)]
    skip_invalid_orders: bool,
    #[arg(long, default_value = "dataset.csv")]
    name: String,
}

#[derive(Args, Debug, Clone)]
struct FitArgs {
    /// `mlp`, `rf` or `svr`.
    #[arg(long, default_value = "mlp")]
    algorithm: String,
    #[arg(long, default_value = "tanh")]
    activation: String,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 800)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Final step size of the cosine schedule.
    #[arg(long, default_value_t = 1e-5)]
    lr_min: f64,
    /// Keep the step size fixed.
    #[arg(long)]
    constant_lr: bool,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Full per-algorithm settings as JSON; replaces the flags above.
    #[arg(long)]
    fit_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `T` (daily total) or `D` (hourly shares).
    #[arg(long)]
    kind: String,
    /// Hidden widths such as `7x82` or `36,36`; network T or D if absent.
    #[arg(long)]
    hidden: Option<String>,
    #[command(flatten)]
    fit: FitArgs,
    /// Hold out this fraction and report its median accuracy.
    #[arg(long)]
    holdout: Option<f64>,
    /// Model path; defaults to `<out>/model_<kind>.json`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Repeat for each shape, e.g. `--hidden 2x82 --hidden 7x82`.
    #[arg(long)]
    hidden: Vec<String>,
    /// Extra baselines, e.g. `--baseline rf --baseline svr`.
    #[arg(long)]
    baseline: Vec<String>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = ACTIVITY_THRESHOLD_HOURS)]
    threshold_hours: f64,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset of the region being scored.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "A")]
    train_region: String,
    #[arg(long, default_value = "B")]
    test_region: String,
    /// Use the test region's own normalization constants.
    #[arg(long)]
    test_region_norm: bool,
    /// Required with `--test-region-norm`.
    #[arg(long)]
    allow_norm_override: bool,
}

#[derive(Args, Debug)]
struct ModelPair {
    /// Falls back to URBANFLUX_MODEL_T.
    #[arg(long)]
    model_t: Option<PathBuf>,
    /// Falls back to URBANFLUX_MODEL_D.
    #[arg(long)]
    model_d: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// 16 comma-separated counts.
    #[arg(long)]
    counts: String,
    /// A single model; prints its raw output.
    #[arg(long, conflicts_with_all = ["model_t", "model_d"])]
    model: Option<PathBuf>,
    #[command(flatten)]
    pair: ModelPair,
    /// `index=value`
    #[arg(long)]
    set: Vec<String>,
    /// `index=delta`
    #[arg(long)]
    add: Vec<String>,
    #[arg(long)]
    scale: Option<i64>,
    #[arg(long)]
    all_equal: Option<i64>,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    pair: ModelPair,
    /// Search the four group deltas instead of all 16 counts.
    #[arg(long)]
    grouped: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    pair: ModelPair,
    #[arg(long, default_value = "heat")]
    ramp: String,
    #[arg(long, default_value_t = 4)]
    cell_px: usize,
    /// Lattice step of the dataset, in meters.
    #[arg(long, default_value_t = 200.0)]
    step: f64,
    #[arg(long, default_value_t = 3)]
    curves: usize,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[command(flatten)]
    pair: ModelPair,
    /// Falls back to URBANFLUX_DATASET.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    max_jobs: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used without `--config`: `synthetic` or `small`.
    #[arg(long, default_value = "synthetic")]
    preset: String,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
}

impl CliError {
    fn usage(m: impl Display) -> Self {
        CliError {
            code: 1,
            kind: "usage",
            message: m.to_string(),
        }
    }

    fn data(m: impl Display) -> Self {
        CliError {
            code: 2,
            kind: "data",
            message: m.to_string(),
        }
    }

    fn divergence(m: impl Display) -> Self {
        CliError {
            code: 3,
            kind: "divergence",
            message: m.to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Divergence { .. } => CliError::divergence(e),
            _ => CliError::data(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::UnknownAlgorithm(_) | EvalError::BadK => CliError::usage(e),
            _ => CliError::data(e),
        }
    }
}

impl From<OptError> for CliError {
    fn from(e: OptError) -> Self {
        match e {
            OptError::Model(m) => m.into(),
            OptError::UnknownObjective(_) | OptError::Config(_) => CliError::usage(e),
            _ => CliError::data(e),
        }
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        if e.is_divergence() {
            CliError::divergence(e)
        } else {
            CliError::data(e)
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e.exit_code() {
            1 => CliError::usage(e),
            3 => CliError::divergence(e),
            _ => CliError::data(e),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data<E: Display>(e: E) -> CliError {
    CliError::data(e)
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn target(kind: &str) -> Result<Target> {
    Target::parse(kind).ok_or_else(|| CliError::usage(format!("--kind must be T or D, got `{kind}`")))
}

fn tag(t: Target) -> &'static str {
    match t {
        Target::Total => "t",
        Target::Hourly => "d",
    }
}

fn parse_counts(s: &str) -> Result<Counts> {
    let v: Vec<i64> = s
        .split(',')
        .map(|t| t.trim().parse::<i64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::usage(format!("--counts: {e}")))?;
    v.try_into()
        .map_err(|v: Vec<i64>| CliError::usage(format!("--counts needs {NUM_CATEGORIES} values, got {}", v.len())))
}

fn parse_pair(s: &str, flag: &str) -> Result<(usize, i64)> {
    let (a, b) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--{flag} expects index=value, got `{s}`")))?;
    let i = a.trim().parse().map_err(|e| CliError::usage(format!("--{flag} `{s}`: {e}")))?;
    let v = b.trim().parse().map_err(|e| CliError::usage(format!("--{flag} `{s}`: {e}")))?;
    Ok((i, v))
}

struct Ctx {
    seed: Option<u64>,
    out: PathBuf,
    force: bool,
    provenance: Provenance,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| data(format!("{}: {e}", self.out.display())))
    }

    fn stamp<T: Serialize>(&self, rel: &str, body: T) -> Result<PathBuf> {
        self.ensure_out()?;
        let p = self.path(rel);
        write_json(
            &p,
            &urbanflux_core::pipeline::Stamped {
                provenance: self.provenance.clone(),
                body,
            },
        )?;
        Ok(p)
    }
}

fn fit_config(fit: &FitArgs, t: Target, hidden: Option<Vec<usize>>, seed: Option<u64>) -> Result<FitConfig> {
    let mut cfg = match &fit.fit_config {
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&s).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => {
            let mut c = mlp_candidate(t, hidden.clone(), fit.epochs).config;
            let m = &mut c.mlp;
            m.activation = Activation::parse(&fit.activation)
                .ok_or_else(|| CliError::usage(format!("unknown activation `{}`", fit.activation)))?;
            m.train.optimizer = Optimizer::parse(&fit.optimizer)
                .ok_or_else(|| CliError::usage(format!("unknown optimizer `{}`", fit.optimizer)))?;
            m.train.learning_rate = fit.lr;
            m.train.lr_min = (!fit.constant_lr).then_some(fit.lr_min);
            m.train.batch_size = fit.batch;
            c
        }
    };
    if hidden.is_some() {
        cfg.mlp.hidden = hidden;
    }
    if let Some(s) = seed {
        cfg.mlp.init_seed = s;
        cfg.mlp.train.seed = s.wrapping_add(1);
        cfg.rf.seed = s;
        cfg.svr.seed = s;
    }
    Ok(cfg)
}

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    MlpSpec::parse_hidden(s).ok_or_else(|| CliError::usage(format!("--hidden `{s}`: use forms like 7x82 or 36,36")))
}

fn load_ds(p: &Path) -> Result<Dataset> {
    load_dataset(p).map_err(data)
}

fn load_one(p: &Path) -> Result<Box<dyn Predictor>> {
    Ok(load_model(p)?)
}

fn load_pair(pair: &ModelPair) -> Result<(Box<dyn Predictor>, Box<dyn Predictor>)> {
    let cfg = ServiceConfig::resolve(pair.model_t.clone(), pair.model_d.clone(), None).map_err(CliError::usage)?;
    Ok((load_one(&cfg.model_t)?, load_one(&cfg.model_d)?))
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&s).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => match a.preset.as_str() {
            "default" => SynthSpec::default_city(0),
            "small" => SynthSpec::small_city(0),
            other => return Err(CliError::usage(format!("unknown preset `{other}` (default, small)"))),
        },
    };
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    if a.shifted {
        spec = spec.shifted();
    }
    let city = gen_city(&spec).map_err(data)?;
    write_city(&city, &ctx.out).map_err(data)?;
    ctx.stamp("synth_spec.json", &spec)?;
    print_json(&serde_json::json!({
        "pois": city.pois.len(),
        "orders": city.orders.len(),
        "days": spec.n_days,
        "out": ctx.out,
    }));
    Ok(())
}

fn cmd_sample(ctx: &Ctx, a: &SampleArgs) -> Result<()> {
    let grid = GridSpec::parse_bbox(&a.bbox, a.step, a.radius).map_err(CliError::usage)?;
    let policy = if a.skip_invalid_orders {
        OrderPolicy::SkipInvalid
    } else {
        OrderPolicy::Strict
    };
    let pois = parse_poi_csv(&a.poi).map_err(data)?;
    let parsed = parse_orders_csv_with(&a.orders, policy).map_err(data)?;
    let days = a.days.unwrap_or_else(|| observed_days(&parsed.orders));
    if days == 0 {
        return Err(data("no orders to infer --days from"));
    }
    let clean = CleanPolicy {
        min_orders_per_hour: a.min_orders_per_hour,
    };
    let (ds, mut report) = sample_dataset(&grid, &pois, &parsed.orders, days, &clean)?;
    report.rejected_orders = parsed.rejected_non_positive + parsed.rejected_too_long;
    ctx.ensure_out()?;
    let path = ctx.path(&a.name);
    save_dataset(&path, &ds, Some(ctx.provenance.clone())).map_err(data)?;
    print_json(&serde_json::json!({ "dataset": path, "days": days, "report": report }));
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let t = target(&a.kind)?;
    let hidden = a.hidden.as_deref().map(parse_hidden).transpose()?;
    let config = fit_config(&a.fit, t, hidden, ctx.seed)?;
    let algos = algorithms();
    let algo = algos
        .get(&a.fit.algorithm)
        .ok_or_else(|| CliError::usage(format!("unknown algorithm `{}` ({})", a.fit.algorithm, algos.names().join(", "))))?;
    let ds = load_ds(&a.dataset)?;
    let (train_set, test_set) = match a.holdout {
        Some(h) if h > 0.0 && h < 1.0 => {
            let (tr, te) = holdout_split(ds.len(), 1.0 - h, ctx.seed.unwrap_or(0));
            (ds.subset(&tr), Some(ds.subset(&te)))
        }
        Some(h) => return Err(CliError::usage(format!("--holdout {h} is not in (0, 1)"))),
        None => (ds.clone(), None),
    };
    let fitted = algo.fit(&train_set, t, &config, test_set.as_ref())?;
    let model_path = a.model.clone().unwrap_or_else(|| ctx.path(&format!("model_{}.json", tag(t))));
    ctx.ensure_out()?;
    save_model(&model_path, fitted.model.as_ref(), Some(ctx.provenance.clone()))?;
    let train_median = score(fitted.model.as_ref(), &train_set)?.median;
    let test_median = test_set.as_ref().map(|d| score(fitted.model.as_ref(), d).map(|s| s.median)).transpose()?;
    #[derive(Serialize)]
    struct Report {
        model: PathBuf,
        target: Target,
        algorithm: String,
        config: FitConfig,
        train_median: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        test_median: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        history: Option<urbanflux_core::nets::TrainHistory>,
    }
    let report = Report {
        model: model_path.clone(),
        target: t,
        algorithm: a.fit.algorithm.clone(),
        config,
        train_median,
        test_median,
        history: fitted.history,
    };
    ctx.stamp(&format!("train_{}.json", tag(t)), &report)?;
    print_json(&serde_json::json!({ "model": model_path, "train_median": train_median, "test_median": test_median }));
    Ok(())
}

fn cmd_cv(ctx: &Ctx, a: &CvArgs) -> Result<()> {
    let t = target(&a.kind)?;
    let mut cands = Vec::new();
    let shapes: Vec<Option<Vec<usize>>> = if a.hidden.is_empty() && a.baseline.is_empty() {
        vec![None]
    } else {
        a.hidden.iter().map(|h| parse_hidden(h).map(Some)).collect::<Result<_>>()?
    };
    for h in shapes {
        let config = fit_config(&a.fit, t, h.clone(), ctx.seed)?;
        let label = MlpSpec::new(t, config.mlp.spec(t).hidden_widths).label();
        cands.push(Candidate {
            label,
            algorithm: a.fit.algorithm.clone(),
            target: t,
            config,
        });
    }
    for b in &a.baseline {
        cands.push(Candidate {
            label: b.clone(),
            algorithm: b.clone(),
            target: t,
            config: fit_config(&a.fit, t, None, ctx.seed)?,
        });
    }
    let ds = load_ds(&a.dataset)?;
    let table = kfold_cv(&ds, a.k, &cands, &algorithms(), ctx.seed.unwrap_or(0))?;
    ctx.stamp(&format!("cv_{}.json", tag(t)), &table)?;
    for r in &table.rows {
        print_json(&serde_json::json!({ "label": r.label, "algorithm": r.algorithm, "pooled_median": r.pooled_median, "fold_medians": r.fold_medians }));
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let m = load_one(&a.model)?;
    let ds = load_ds(&a.dataset)?.renormalized(*m.norm_info());
    let s = score(m.as_ref(), &ds)?;
    let (sparse, dense) = split_by_activity(&ds, a.threshold_hours);
    let part = |d: &Dataset| -> Result<Option<f64>> {
        if d.is_empty() {
            return Ok(None);
        }
        Ok(Some(score(m.as_ref(), d)?.median))
    };
    let t = m.target();
    ctx.ensure_out()?;
    save_scores_csv(&ctx.path(&format!("scores_{}.csv", tag(t))), t, &s.samples)?;
    let body = serde_json::json!({
        "target": t,
        "algorithm": m.algorithm(),
        "median": s.median,
        "scored": s.scored,
        "excluded": s.excluded,
        "threshold_hours": a.threshold_hours,
        "sparse": { "count": sparse.len(), "median": part(&sparse)? },
        "dense": { "count": dense.len(), "median": part(&dense)? },
    });
    ctx.stamp(&format!("eval_{}.json", tag(t)), &body)?;
    print_json(&body);
    Ok(())
}

fn cmd_transfer(ctx: &Ctx, a: &TransferArgs) -> Result<()> {
    let m = load_one(&a.model)?;
    let ds = load_ds(&a.dataset)?;
    let norm = if a.test_region_norm {
        TransferNorm::TestRegion
    } else {
        TransferNorm::Training
    };
    let r = transfer_eval(m.as_ref(), &a.train_region, &a.test_region, &ds, norm, a.allow_norm_override).map_err(|e| match e {
        ModelError::NormMismatch => CliError::usage("--test-region-norm needs --allow-norm-override"),
        e => e.into(),
    })?;
    ctx.stamp(&format!("transfer_{}.json", tag(m.target())), &r)?;
    print_json(&serde_json::json!({ "target": r.target, "median": r.median, "scored": r.scored, "excluded": r.excluded }));
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let counts = parse_counts(&a.counts)?;
    let mut edits = Vec::new();
    for s in &a.set {
        let (index, value) = parse_pair(s, "set")?;
        edits.push(Edit::Set { index, value });
    }
    for s in &a.add {
        let (index, delta) = parse_pair(s, "add")?;
        edits.push(Edit::Add { index, delta });
    }
    if let Some(value) = a.all_equal {
        edits.push(Edit::AllEqual { value });
    }
    if let Some(factor) = a.scale {
        edits.push(Edit::Scale { factor });
    }
    if let Some(p) = &a.model {
        if !edits.is_empty() {
            return Err(CliError::usage("edits need both --model-t and --model-d"));
        }
        if counts.iter().any(|&c| c < 0) {
            return Err(CliError::usage("counts must be non-negative"));
        }
        let m = load_one(p)?;
        let f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let env = urbanflux_core::features::EnvFeatures::from_counts(&f.try_into().expect("16 counts"), m.norm_info())
            .ok_or_else(|| data("all counts are zero; proportions are undefined"))?;
        let out = m.predict(&env.to_vec())?;
        print_json(&serde_json::json!({ "target": m.target(), "algorithm": m.algorithm(), "output": out }));
        return Ok(());
    }
    let (mt, md) = load_pair(&a.pair)?;
    if edits.is_empty() {
        print_json(&predict_counts(&counts, mt.as_ref(), md.as_ref())?);
    } else {
        print_json(&what_if(&counts, &edits, mt.as_ref(), md.as_ref())?);
    }
    Ok(())
}

fn cmd_optimize(ctx: &Ctx, a: &OptimizeArgs) -> Result<()> {
    let s = fs::read_to_string(&a.scenario).map_err(|e| CliError::usage(format!("{}: {e}", a.scenario.display())))?;
    let mut sc: Scenario = serde_json::from_str(&s).map_err(|e| CliError::usage(format!("{}: {e}", a.scenario.display())))?;
    if let Some(seed) = ctx.seed {
        sc.ga.seed = seed;
    }
    if a.grouped && sc.groups.is_none() {
        sc.groups = Some(default_groups());
    }
    let (mt, md) = load_pair(&a.pair)?;
    let res = sc.run(mt.as_ref(), md.as_ref())?;
    let path = ctx.stamp("optimize.json", serde_json::json!({ "scenario": sc, "result": res }))?;
    print_json(&serde_json::json!({
        "out": path,
        "best_counts": res.best_counts,
        "base_fitness": res.base_fitness,
        "best_fitness": res.best_fitness,
        "evaluations": res.evaluations,
    }));
    Ok(())
}

/// Lattice implied by the sample centers, anchored at their south-west corner.
fn grid_of(ds: &Dataset, step: f64) -> Result<GridSpec> {
    let mut min = GeoPoint {
        lon: f64::INFINITY,
        lat: f64::INFINITY,
    };
    let mut max = GeoPoint {
        lon: f64::NEG_INFINITY,
        lat: f64::NEG_INFINITY,
    };
    for s in &ds.samples {
        min.lon = min.lon.min(s.center.lon);
        min.lat = min.lat.min(s.center.lat);
        max.lon = max.lon.max(s.center.lon);
        max.lat = max.lat.max(s.center.lat);
    }
    let mut g = GridSpec::new(min, max);
    g.step_m = step;
    // single-row or single-column datasets still need a non-degenerate box
    let ext = g.extent_m();
    if ext.x < step || ext.y < step {
        g.max = urbanflux_core::geo_grid::unproject(
            urbanflux_core::geo_grid::LocalXY {
                x: ext.x.max(step),
                y: ext.y.max(step),
            },
            min,
        );
    }
    g.lattice_dims().map_err(data)?;
    Ok(g)
}

fn cmd_render(ctx: &Ctx, a: &RenderArgs) -> Result<()> {
    let ramp = ramps().get(&a.ramp).ok_or_else(|| {
        CliError::usage(format!("unknown ramp `{}` ({})", a.ramp, ramps().names().join(", ")))
    })?;
    let ds = load_ds(&a.dataset)?;
    let grid = grid_of(&ds, a.step)?;
    let hash = Some(ctx.provenance.config_hash.as_str());
    let mut written = Vec::new();
    let mut put = |rel: &str, bytes: &[u8]| -> Result<()> {
        let p = ctx.path(rel);
        write_bytes(&p, bytes).map_err(data)?;
        written.push(p);
        Ok(())
    };
    let density = GridRaster::from_points(&grid, ds.samples.iter().map(|s| (s.center, s.counts.iter().sum::<u32>() as f64)))
        .map_err(data)?;
    let vht = GridRaster::from_points(&grid, ds.samples.iter().map(|s| (s.center, s.raw_total_vht))).map_err(data)?;
    put("maps/density.png", &heatmap_png(&density, &ramp, a.cell_px, hash).map_err(data)?)?;
    put("maps/vht.png", &heatmap_png(&vht, &ramp, a.cell_px, hash).map_err(data)?)?;
    for (path, name) in [(&a.pair.model_t, "t"), (&a.pair.model_d, "d")] {
        if let Some(p) = path {
            let m = load_one(p)?;
            let surface = error_surface(m.as_ref(), &ds.renormalized(*m.norm_info()))?;
            put(&format!("maps/error_{name}.png"), &error_map_png(&surface, &grid, a.cell_px, hash).map_err(data)?)?;
            if name == "d" {
                let mut series = Vec::new();
                for s in ds.samples.iter().filter(|s| s.has_demand()).take(a.curves) {
                    series.push(Series {
                        label: format!("ST{} truth", s.id),
                        values: s.demand.hourly.to_vec(),
                        faded: true,
                    });
                    series.push(Series {
                        label: format!("ST{} predicted", s.id),
                        values: m.predict(&s.env.to_vec())?,
                        faded: false,
                    });
                }
                put("curves.svg", curves_svg(&series, "Hourly shares").map_err(data)?.as_bytes())?;
            }
        }
    }
    print_json(&serde_json::json!({ "written": written }));
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let addr = a.addr.parse().map_err(|e| CliError::usage(format!("--addr `{}`: {e}", a.addr)))?;
    let mut cfg = ServiceConfig::resolve(a.pair.model_t.clone(), a.pair.model_d.clone(), a.dataset.clone())
        .map_err(CliError::usage)?;
    cfg.max_running_jobs = a.max_jobs;
    let rt = tokio::runtime::Runtime::new().map_err(data)?;
    eprintln!("listening on {addr}");
    rt.block_on(urbanflux_service::serve(addr, cfg)).map_err(data)
}

fn run_config(ctx: &Ctx, a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => match a.preset.as_str() {
            "synthetic" => RunConfig::synthetic(0),
            "small" => RunConfig::small(0),
            other => return Err(CliError::usage(format!("unknown preset `{other}` (synthetic, small)"))),
        },
    };
    if let Some(s) = ctx.seed {
        cfg.apply_seed(s);
    }
    Ok(cfg)
}

fn cmd_run(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let cfg = run_config(ctx, a)?;
    if a.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let m = Pipeline::new(cfg, &ctx.out, ctx.force)?.run()?;
    for s in &m.stages {
        print_json(&serde_json::json!({ "stage": s.stage, "status": s.status }));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("--threads: {e}")))?;
    }
    let hash = sha256_hex(format!("{:?}", cli.cmd).as_bytes());
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out.clone(),
        force: cli.force,
        provenance: Provenance {
            config_hash: hash,
            seed: cli.seed.unwrap_or(0),
        },
    };
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(&ctx, a),
        Cmd::Sample(a) => cmd_sample(&ctx, a),
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::Cv(a) => cmd_cv(&ctx, a),
        Cmd::Eval(a) => cmd_eval(&ctx, a),
        Cmd::Transfer(a) => cmd_transfer(&ctx, a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Optimize(a) => cmd_optimize(&ctx, a),
        Cmd::Render(a) => cmd_render(&ctx, a),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Run(a) => cmd_run(&ctx, a),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind, "message": e.message, "exit_code": e.code });
    eprintln!("{line}");
    ExitCode::from(e.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return fail(&CliError::usage(first));
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
