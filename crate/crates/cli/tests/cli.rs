use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BBOX: &str = "110.138,19.909,110.494,20.104";
const NANDA: &str = "88,19,10,18,72,103,112,3,122,44,108,71,0,27,90,16";

fn urbanflux(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urbanflux"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> Vec<Value> {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn err_line(o: &Output) -> Value {
    let s = String::from_utf8_lossy(&o.stderr);
    let line = s.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("json error line")
}

fn synth_and_sample(dir: &Path) {
    ok(&urbanflux(dir, &["synth", "--preset", "small", "--seed", "4"]));
    let poi = dir.join("poi.csv");
    let orders = dir.join("orders.csv");
    ok(&urbanflux(
        dir,
        &[
            "sample",
            "--poi",
            poi.to_str().unwrap(),
            "--orders",
            orders.to_str().unwrap(),
            "--bbox",
            BBOX,
            "--step",
            "200",
            "--radius",
            "1000",
        ],
    ));
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = urbanflux(dir.path(), &["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(err_line(&o)["exit_code"], 1);

    let o = urbanflux(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let o = urbanflux(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn sample_over_the_haikou_box() {
    let dir = tempfile::tempdir().unwrap();
    synth_and_sample(dir.path());
    let csv = std::fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert!(csv.lines().count() > 10);
    assert!(dir.path().join("dataset.norm.json").exists());
}

#[test]
fn missing_input_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = urbanflux(
        dir.path(),
        &["sample", "--poi", "/nope/poi.csv", "--orders", "/nope/o.csv", "--bbox", BBOX],
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(err_line(&o)["error"], "data");

    let o = urbanflux(dir.path(), &["sample", "--poi", "a", "--orders", "b", "--bbox", "1,2,3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_and_sample(d);
    let ds = d.join("dataset.csv");
    for (kind, hidden) in [("D", "7x82"), ("T", "8,8")] {
        let lines = ok(&urbanflux(
            d,
            &["train", "--dataset", ds.to_str().unwrap(), "--kind", kind, "--hidden", hidden, "--epochs", "20", "--seed", "1"],
        ));
        assert!(lines[0]["train_median"].as_f64().unwrap().is_finite());
    }
    let mt = d.join("model_t.json");
    let md = d.join("model_d.json");

    let single = ok(&urbanflux(d, &["predict", "--model", md.to_str().unwrap(), "--counts", NANDA]));
    let q: Vec<f64> = single[0]["output"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(q.len(), 24);
    assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let pair = ["--model-t", mt.to_str().unwrap(), "--model-d", md.to_str().unwrap()];
    let mut args = vec!["predict", "--counts", NANDA];
    args.extend(pair);
    let hybrid = ok(&urbanflux(d, &args));
    let h = &hybrid[0];
    let total = h["total_vht"].as_f64().unwrap();
    let sum: f64 = h["hourly_vht"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - total).abs() <= 1e-9 * total.max(1.0));
    // the D model file alone and the hybrid agree on the shares
    let p: Vec<f64> = h["proportions"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-12);
    }

    args.extend(["--add", "8=80"]);
    let w = ok(&urbanflux(d, &args));
    assert!(w[0]["divergence"].as_f64().unwrap() >= 0.0);

    let o = urbanflux(d, &["predict", "--model", md.to_str().unwrap(), "--counts", "1,2"]);
    assert_eq!(o.status.code(), Some(1));
    let zeros = vec!["0"; 16].join(",");
    let o = urbanflux(d, &["predict", "--model", md.to_str().unwrap(), "--counts", &zeros]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_small_then_rerun_skips() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&urbanflux(dir.path(), &["run", "--preset", "small", "--seed", "3"]));
    assert!(first.iter().any(|l| l["status"] == "ran"));
    let second = ok(&urbanflux(dir.path(), &["run", "--preset", "small", "--seed", "3"]));
    for l in &second {
        assert_ne!(l["status"], "ran", "{l}");
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn config_without_grid_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{ "seed": 1 }"#).unwrap();
    let o = urbanflux(dir.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = err_line(&o);
    assert!(e["message"].as_str().unwrap().contains("grid"), "{e}");
}
