//! Read-only HTTP API for the what-if UI.
//!
//! Routes: `GET /health`, `POST /predict`, `POST /optimize`,
//! `GET /jobs/{id}`, `GET /dataset/summary`, `GET /samples/{id}`.
//! Every number in a response body is rounded to 12 significant digits.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, Weak};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{mpsc, Semaphore};

use urbanflux_core::features::{load_dataset, Dataset, DemandFeatures, EnvFeatures, NormalizationInfo};
use urbanflux_core::geo_grid::GeoPoint;
use urbanflux_core::ingest::{category_name, NUM_CATEGORIES};
use urbanflux_core::optimizer::{predict_counts, Counts, OptError, OptimizeResult, Scenario};
use urbanflux_core::predictor::{load_saved, ModelError, Predictor, Target};

pub const ENV_MODEL_T: &str = "URBANFLUX_MODEL_T";
pub const ENV_MODEL_D: &str = "URBANFLUX_MODEL_D";
pub const ENV_DATASET: &str = "URBANFLUX_DATASET";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("missing {0}: pass it as a flag or set the environment variable")]
    Missing(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub model_t: PathBuf,
    pub model_d: PathBuf,
    pub dataset: Option<PathBuf>,
    /// Optimization jobs allowed to run at once.
    pub max_running_jobs: usize,
}

impl ServiceConfig {
    /// Explicit paths win over `URBANFLUX_MODEL_T`, `URBANFLUX_MODEL_D` and
    /// `URBANFLUX_DATASET`.
    pub fn resolve(model_t: Option<PathBuf>, model_d: Option<PathBuf>, dataset: Option<PathBuf>) -> Result<Self, ServiceError> {
        let env = |k: &str| std::env::var_os(k).map(PathBuf::from);
        Ok(ServiceConfig {
            model_t: model_t.or_else(|| env(ENV_MODEL_T)).ok_or(ServiceError::Missing(ENV_MODEL_T))?,
            model_d: model_d.or_else(|| env(ENV_MODEL_D)).ok_or(ServiceError::Missing(ENV_MODEL_D))?,
            dataset: dataset.or_else(|| env(ENV_DATASET)),
            max_running_jobs: 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub algorithm: String,
    pub format_version: u32,
}

/// A loaded T/D pair.
pub struct Models {
    pub t: Arc<dyn Predictor>,
    pub d: Arc<dyn Predictor>,
    pub versions: BTreeMap<String, ModelVersion>,
}

impl Models {
    pub fn new(t: Box<dyn Predictor>, d: Box<dyn Predictor>) -> Result<Self, ModelError> {
        for (m, want) in [(&t, Target::Total), (&d, Target::Hourly)] {
            if m.target() != want {
                return Err(ModelError::WrongTarget {
                    expected: want,
                    got: m.target(),
                });
            }
        }
        if t.norm_info() != d.norm_info() {
            return Err(ModelError::NormMismatch);
        }
        let version = |m: &dyn Predictor| ModelVersion {
            algorithm: m.algorithm().to_string(),
            format_version: m.to_saved().format_version(),
        };
        let versions = BTreeMap::from([("T".to_string(), version(t.as_ref())), ("D".to_string(), version(d.as_ref()))]);
        Ok(Models {
            t: t.into(),
            d: d.into(),
            versions,
        })
    }

    pub fn load(t: &FsPath, d: &FsPath) -> Result<Self, ModelError> {
        Ok(Self::new(load_saved(t)?.into_predictor()?, load_saved(d)?.into_predictor()?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeJob {
    pub id: u64,
    pub status: JobStatus,
    pub scenario: Scenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<OptimizeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct AppState {
    models: RwLock<Option<Arc<Models>>>,
    dataset: RwLock<Option<Arc<Dataset>>>,
    jobs: RwLock<BTreeMap<u64, OptimizeJob>>,
    next_id: AtomicU64,
    queue: mpsc::UnboundedSender<u64>,
}

impl AppState {
    /// Empty state with a job worker running at most `max_running_jobs`
    /// jobs at once, started in FIFO order. Must be called inside a tokio
    /// runtime.
    pub fn new(max_running_jobs: usize) -> Arc<Self> {
        let (tx, mut rx) = mpsc::unbounded_channel::<u64>();
        let state = Arc::new(AppState {
            models: RwLock::new(None),
            dataset: RwLock::new(None),
            jobs: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            queue: tx,
        });
        let weak: Weak<AppState> = Arc::downgrade(&state);
        let slots = Arc::new(Semaphore::new(max_running_jobs.max(1)));
        tokio::spawn(async move {
            while let Some(id) = rx.recv().await {
                let Ok(permit) = slots.clone().acquire_owned().await else {
                    break;
                };
                let Some(st) = weak.upgrade() else {
                    break;
                };
                tokio::spawn(async move {
                    st.run_job(id).await;
                    drop(permit);
                });
            }
        });
        state
    }

    pub fn set_models(&self, models: Models) {
        *self.models.write().unwrap() = Some(Arc::new(models));
    }

    pub fn set_dataset(&self, ds: Dataset) {
        *self.dataset.write().unwrap() = Some(Arc::new(ds));
    }

    pub fn models(&self) -> Option<Arc<Models>> {
        self.models.read().unwrap().clone()
    }

    fn dataset(&self) -> Option<Arc<Dataset>> {
        self.dataset.read().unwrap().clone()
    }

    pub fn job(&self, id: u64) -> Option<OptimizeJob> {
        self.jobs.read().unwrap().get(&id).cloned()
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut OptimizeJob)) {
        if let Some(j) = self.jobs.write().unwrap().get_mut(&id) {
            f(j);
        }
    }

    fn enqueue(&self, scenario: Scenario) -> u64 {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        self.jobs.write().unwrap().insert(
            id,
            OptimizeJob {
                id,
                status: JobStatus::Queued,
                scenario,
                result: None,
                error: None,
            },
        );
        let _ = self.queue.send(id);
        id
    }

    async fn run_job(&self, id: u64) {
        let (Some(job), Some(models)) = (self.job(id), self.models()) else {
            self.update(id, |j| {
                j.status = JobStatus::Failed;
                j.error = Some("models are not loaded".into());
            });
            return;
        };
        self.update(id, |j| j.status = JobStatus::Running);
        let out = tokio::task::spawn_blocking(move || job.scenario.run(models.t.as_ref(), models.d.as_ref())).await;
        self.update(id, |j| match out {
            Ok(Ok(r)) => {
                j.status = JobStatus::Done;
                j.result = Some(r);
            }
            Ok(Err(e)) => {
                j.status = JobStatus::Failed;
                j.error = Some(e.to_string());
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(format!("worker: {e}"));
            }
        });
    }
}

/// Rounds every number in `v` to 12 significant digits.
pub fn round_numbers(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(0.0);
            let r: f64 = format!("{x:.11e}").parse().unwrap_or(x);
            if let Some(m) = serde_json::Number::from_f64(r) {
                *n = m;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_numbers),
        Value::Object(o) => o.values_mut().for_each(round_numbers),
        _ => {}
    }
}

fn json<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let mut v = serde_json::to_value(body).unwrap_or(Value::Null);
    round_numbers(&mut v);
    (status, [(header::CONTENT_TYPE, "application/json")], v.to_string()).into_response()
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    json(status, &serde_json::json!({ "error": msg.into() }))
}

fn not_loaded() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "models are not loaded yet")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .route("/optimize", post(optimize))
        .route("/jobs/{id}", get(job))
        .route("/dataset/summary", get(summary))
        .route("/samples/{id}", get(sample))
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Response {
    match st.models() {
        Some(m) => json(
            StatusCode::OK,
            &serde_json::json!({ "status": "ok", "model_versions": m.versions }),
        ),
        None => json(StatusCode::SERVICE_UNAVAILABLE, &serde_json::json!({ "status": "loading" })),
    }
}

/// Reads `counts` as 16 non-negative integers.
pub fn parse_counts(body: &[u8]) -> Result<Counts, String> {
    let v: Value = serde_json::from_slice(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let arr = v
        .get("counts")
        .and_then(Value::as_array)
        .ok_or("body needs a `counts` array")?;
    if arr.len() != NUM_CATEGORIES {
        return Err(format!("counts has {} entries, expected {NUM_CATEGORIES}", arr.len()));
    }
    let mut c = [0i64; NUM_CATEGORIES];
    for (j, x) in arr.iter().enumerate() {
        c[j] = x.as_i64().ok_or_else(|| format!("counts[{j}] is not an integer"))?;
        if c[j] < 0 {
            return Err(format!("counts[{j}] is negative"));
        }
    }
    Ok(c)
}

async fn predict(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let Some(m) = st.models() else {
        return not_loaded();
    };
    let counts = match parse_counts(&body) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match predict_counts(&counts, m.t.as_ref(), m.d.as_ref()) {
        Ok(p) => json(StatusCode::OK, &p),
        Err(OptError::ZeroCounts) => error(StatusCode::UNPROCESSABLE_ENTITY, "all counts are zero; proportions are undefined"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn optimize(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    if st.models().is_none() {
        return not_loaded();
    }
    let scenario: Scenario = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid scenario: {e}")),
    };
    if let Err(e) = scenario.validate() {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    let id = st.enqueue(scenario);
    json(StatusCode::ACCEPTED, &serde_json::json!({ "job_id": id }))
}

async fn job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match id.parse().ok().and_then(|id| st.job(id)) {
        Some(j) => json(StatusCode::OK, &j),
        None => error(StatusCode::NOT_FOUND, format!("no job `{id}`")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTotal {
    pub index: usize,
    pub name: String,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub sample_count: usize,
    /// `[min, max]` corners of the sample centers.
    pub bbox: [GeoPoint; 2],
    pub norm_info: NormalizationInfo,
    pub categories: Vec<CategoryTotal>,
}

pub fn summarize(ds: &Dataset) -> DatasetSummary {
    let mut min = GeoPoint {
        lon: f64::INFINITY,
        lat: f64::INFINITY,
    };
    let mut max = GeoPoint {
        lon: f64::NEG_INFINITY,
        lat: f64::NEG_INFINITY,
    };
    let mut totals = [0u64; NUM_CATEGORIES];
    for s in &ds.samples {
        min.lon = min.lon.min(s.center.lon);
        min.lat = min.lat.min(s.center.lat);
        max.lon = max.lon.max(s.center.lon);
        max.lat = max.lat.max(s.center.lat);
        for (t, &c) in totals.iter_mut().zip(&s.counts) {
            *t += c as u64;
        }
    }
    DatasetSummary {
        sample_count: ds.len(),
        bbox: [min, max],
        norm_info: ds.info,
        categories: totals
            .iter()
            .enumerate()
            .map(|(index, &total)| CategoryTotal {
                index,
                name: category_name(index).unwrap_or("").to_string(),
                total,
            })
            .collect(),
    }
}

async fn summary(State(st): State<Arc<AppState>>) -> Response {
    match st.dataset() {
        Some(ds) => json(StatusCode::OK, &summarize(&ds)),
        None => error(StatusCode::NOT_FOUND, "no dataset loaded"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub id: u32,
    pub center: GeoPoint,
    pub counts: [u32; NUM_CATEGORIES],
    pub env: EnvFeatures,
    pub demand: DemandFeatures,
    pub raw_total_vht: f64,
    pub raw_hourly_vht: Vec<f64>,
}

async fn sample(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let Some(ds) = st.dataset() else {
        return error(StatusCode::NOT_FOUND, "no dataset loaded");
    };
    match id.parse().ok().and_then(|id| ds.get(id)) {
        Some(s) => json(
            StatusCode::OK,
            &SampleView {
                id: s.id,
                center: s.center,
                counts: s.counts,
                env: s.env.clone(),
                demand: s.demand.clone(),
                raw_total_vht: s.raw_total_vht,
                raw_hourly_vht: s.raw_hourly_vht().to_vec(),
            },
        ),
        None => error(StatusCode::NOT_FOUND, format!("no sample `{id}`")),
    }
}

/// Binds `addr`, loads models and dataset in the background (health
/// answers 503 until then) and serves until the process exits.
pub async fn serve(addr: SocketAddr, cfg: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::new(cfg.max_running_jobs);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let loader = state.clone();
    let loaded = tokio::task::spawn_blocking(move || -> Result<(), ServiceError> {
        if let Some(p) = &cfg.dataset {
            loader.set_dataset(load_dataset(p).map_err(|e| ServiceError::Dataset(e.to_string()))?);
        }
        loader.set_models(Models::load(&cfg.model_t, &cfg.model_d)?);
        Ok(())
    });
    let server = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    match loaded.await {
        Ok(Ok(())) => {}
        Ok(Err(e)) => return Err(e),
        Err(e) => return Err(ServiceError::Io(std::io::Error::other(e))),
    }
    match server.await {
        Ok(r) => Ok(r?),
        Err(e) => Err(ServiceError::Io(std::io::Error::other(e))),
    }
}
