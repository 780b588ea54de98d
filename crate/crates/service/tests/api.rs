use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use urbanflux_core::features::Dataset;
use urbanflux_core::nets::{init_model, MlpSpec};
use urbanflux_core::optimizer::ConstraintSet;
use urbanflux_core::pipeline::sample_dataset;
use urbanflux_core::predictor::Target;
use urbanflux_core::synth::{gen_city, SynthSpec};
use urbanflux_service::{round_numbers, router, AppState, Models, ServiceConfig, ENV_MODEL_D, ENV_MODEL_T};

const NANDA: [i64; 16] = [88, 19, 10, 18, 72, 103, 112, 3, 122, 44, 108, 71, 0, 27, 90, 16];

fn dataset() -> Dataset {
    let spec = SynthSpec::small_city(2);
    let city = gen_city(&spec).unwrap();
    sample_dataset(&spec.grid, &city.pois, &city.orders, spec.n_days, &Default::default())
        .unwrap()
        .0
}

fn models(ds: &Dataset) -> Models {
    let t = init_model(&MlpSpec::new(Target::Total, vec![8, 8]), ds.info, 1).unwrap();
    let d = init_model(&MlpSpec::new(Target::Hourly, vec![8, 8]), ds.info, 2).unwrap();
    Models::new(Box::new(t), Box::new(d)).unwrap()
}

fn loaded() -> Arc<AppState> {
    let ds = dataset();
    let st = AppState::new(1);
    st.set_models(models(&ds));
    st.set_dataset(ds);
    st
}

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_gates_on_model_load() {
    let st = AppState::new(1);
    let (s, _) = call(&st, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, _) = call(&st, "POST", "/predict", Some(json!({ "counts": NANDA }))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    st.set_models(models(&dataset()));
    let (s, v) = call(&st, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["model_versions"]["T"]["format_version"], 1);
    assert_eq!(v["model_versions"]["D"]["format_version"], 1);
}

#[tokio::test]
async fn predict_contract() {
    let st = loaded();
    let (s, v) = call(&st, "POST", "/predict", Some(json!({ "counts": NANDA }))).await;
    assert_eq!(s, StatusCode::OK);
    let hourly: Vec<f64> = v["hourly_vht"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let total = v["total_vht"].as_f64().unwrap();
    assert_eq!(hourly.len(), 24);
    assert!(hourly.iter().all(|&h| h >= 0.0));
    assert!((hourly.iter().sum::<f64>() - total).abs() <= 1e-9 * total.max(1.0));
    assert_eq!(v["proportions"].as_array().unwrap().len(), 24);

    // identical requests, identical bodies
    let (_, again) = call(&st, "POST", "/predict", Some(json!({ "counts": NANDA }))).await;
    assert_eq!(v, again);

    let (s, _) = call(&st, "POST", "/predict", Some(json!({ "counts": vec![0; 16] }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&st, "POST", "/predict", Some(json!({ "counts": vec![1; 15] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let mut neg = NANDA;
    neg[3] = -1;
    let (s, _) = call(&st, "POST", "/predict", Some(json!({ "counts": neg }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, "POST", "/predict", Some(json!({ "counts": vec![1.5; 16] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

async fn wait_done(st: &Arc<AppState>, id: u64) -> Value {
    for _ in 0..600 {
        let (s, v) = call(st, "GET", &format!("/jobs/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn optimize_jobs() {
    let st = loaded();
    let scenario = json!({
        "base_counts": NANDA,
        "delta_bound": 20,
        "ga": { "population": 16, "generations": 10, "seed": 3 }
    });
    let mut ids = Vec::new();
    for _ in 0..3 {
        let (s, v) = call(&st, "POST", "/optimize", Some(scenario.clone())).await;
        assert_eq!(s, StatusCode::ACCEPTED);
        ids.push(v["job_id"].as_u64().unwrap());
    }
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    // at most one job runs at a time
    for _ in 0..50 {
        let running = ids.iter().filter(|&&id| st.job(id).unwrap().status == urbanflux_service::JobStatus::Running).count();
        assert!(running <= 1);
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    let mut cs = ConstraintSet::new(NANDA);
    cs.delta_bound = 20;
    let mut bodies = Vec::new();
    for id in ids {
        let v = wait_done(&st, id).await;
        assert_eq!(v["status"], "done", "{v}");
        let best: Vec<i64> = v["result"]["best_counts"].as_array().unwrap().iter().map(|x| x.as_i64().unwrap()).collect();
        assert!(cs.is_satisfied(&best.try_into().unwrap()));
        assert!(!v["result"]["history"].as_array().unwrap().is_empty());
        bodies.push(v["result"].clone());
    }
    // same scenario, same seed
    assert_eq!(bodies[0], bodies[1]);

    let bad = json!({ "base_counts": NANDA, "delta_bound": -1 });
    let (s, _) = call(&st, "POST", "/optimize", Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, "POST", "/optimize", Some(json!({ "base_counts": [1, 2] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, "GET", "/jobs/999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&st, "GET", "/jobs/abc", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn dataset_endpoints() {
    let st = loaded();
    let n = dataset().len();
    let (s, v) = call(&st, "GET", "/dataset/summary", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["sample_count"].as_u64().unwrap() as usize, n);
    assert_eq!(v["categories"].as_array().unwrap().len(), 16);
    let (s, v) = call(&st, "GET", "/samples/0", None).await;
    assert_eq!(s, StatusCode::OK);
    let p: f64 = v["env"]["proportions"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((p - 1.0).abs() <= 1e-9);
    let (s, _) = call(&st, "GET", &format!("/samples/{n}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let empty = AppState::new(1);
    let (s, _) = call(&empty, "GET", "/dataset/summary", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[test]
fn twelve_significant_digits() {
    let mut v = json!({ "a": [0.1234567890123456, 1.0 / 3.0, 2.0, 12345678.901234567], "n": 7 });
    round_numbers(&mut v);
    assert_eq!(v.to_string(), r#"{"a":[0.123456789012,0.333333333333,2.0,12345678.9012],"n":7}"#);
}

#[test]
fn config_from_environment() {
    std::env::set_var(ENV_MODEL_T, "/m/t.json");
    std::env::set_var(ENV_MODEL_D, "/m/d.json");
    let c = ServiceConfig::resolve(None, Some("/x/d.json".into()), None).unwrap();
    assert_eq!(c.model_t, std::path::PathBuf::from("/m/t.json"));
    assert_eq!(c.model_d, std::path::PathBuf::from("/x/d.json"));
    std::env::remove_var(ENV_MODEL_T);
    assert!(ServiceConfig::resolve(None, None, None).is_err());
}

#[tokio::test]
async fn predict_p95_latency() {
    let st = loaded();
    let mut ms = Vec::new();
    for i in 0..200 {
        let mut c = NANDA;
        c[0] += i;
        let t = std::time::Instant::now();
        let (s, _) = call(&st, "POST", "/predict", Some(json!({ "counts": c }))).await;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
        assert_eq!(s, StatusCode::OK);
    }
    ms.sort_by(f64::total_cmp);
    let p95 = ms[189];
    assert!(p95 < 50.0, "p95 {p95:.3} ms");
}
