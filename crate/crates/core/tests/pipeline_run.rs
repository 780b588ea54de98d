use std::fs;
use std::path::Path;

use urbanflux_core::pipeline::{stage_outputs, Pipeline, RunConfig, StageStatus, STAGES};

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for stage in STAGES.iter().filter(|s| **s != "cv") {
        for rel in stage_outputs(stage) {
            out.push((rel.to_string(), fs::read(dir.join(rel)).unwrap()));
        }
    }
    out
}

#[test]
fn small_run_is_idempotent_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let cfg = RunConfig::small(3);

    let m = Pipeline::new(cfg.clone(), &a, false).unwrap().run().unwrap();
    assert!(m.stages.iter().all(|s| s.status != StageStatus::Skipped));
    assert_eq!(m.stages.iter().find(|s| s.stage == "cv").unwrap().status, StageStatus::Disabled);

    let again = Pipeline::new(cfg.clone(), &a, false).unwrap().run().unwrap();
    assert!(again
        .stages
        .iter()
        .all(|s| matches!(s.status, StageStatus::Skipped | StageStatus::Disabled)));

    Pipeline::new(cfg.clone(), &b, true).unwrap().run().unwrap();
    let (xa, xb) = (artifacts(&a), artifacts(&b));
    for ((name, x), (_, y)) in xa.iter().zip(&xb) {
        assert!(x == y, "{name} differs between runs");
    }

    // provenance is in every report and model
    let hash = cfg.hash();
    for rel in ["model_t.json", "model_d.json", "holdout.json", "eval.json", "transfer.json", "optimize.json", "dataset.norm.json", "curves.svg"] {
        let s = fs::read_to_string(a.join(rel)).unwrap();
        assert!(s.contains(&hash), "{rel} lacks the config hash");
    }
}
