//! Acceptance checks, one line each. Runs without the libtest harness so the
//! lines come out in order; exits non-zero if any check fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urbanflux_core::evalx::{holdout_split, split_by_activity, transfer_eval, TransferNorm, ACTIVITY_THRESHOLD_HOURS};
use urbanflux_core::features::{build_raw_samples, clean, normalize, CleanPolicy, Dataset, EnvFeatures, NormalizationInfo};
use urbanflux_core::geo_grid::{points_in_buffer, unproject, BufferIndex, GeoPoint, GridSpec, LocalXY};
use urbanflux_core::ingest::{Category, PoiRecord, TripOrder};
use urbanflux_core::metrics::{accuracy_dist, accuracy_total, median_accuracy};
use urbanflux_core::nets::{init_model, predict_hybrid, Activation, MlpSpec};
use urbanflux_core::optimizer::{
    default_groups, model_fitness, objectives, repair, run_with, ConstraintSet, CountEncoding, Counts, Encoding, GaConfig,
    GroupedEncoding,
};
use urbanflux_core::pipeline::{mlp_candidate, sample_dataset, stage_outputs, Pipeline, RunConfig, STAGES};
use urbanflux_core::predictor::{Predictor, Target};
use urbanflux_core::registry::algorithms;
use urbanflux_core::synth::{gen_city, SynthSpec};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const NANDA: Counts = [88, 19, 10, 18, 72, 103, 112, 3, 122, 44, 108, 71, 0, 27, 90, 16];

fn info() -> NormalizationInfo {
    NormalizationInfo {
        d_max: 500.0,
        c_max: 40.0,
        days: 30,
    }
}

fn gradients() -> Check {
    let start = Instant::now();
    let spec = MlpSpec::new(Target::Hourly, vec![5]).with_activation(Activation::Sigmoid);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..12u64 {
        let mut m = init_model(&spec, info(), seed).map_err(|e| e.to_string())?;
        for b in m.biases.iter_mut() {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let x = Array2::from_shape_fn((10, 17), |_| rng.random::<f64>());
        let mut t = Array2::from_shape_fn((10, 24), |_| rng.random::<f64>());
        for mut row in t.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let (_, g) = m.loss_and_grad(&x, &t);
        let n = m.param_count();
        for _ in 0..100 {
            let i = rng.random_range(0..n);
            let orig = m.param(i);
            let eps = 1e-5;
            m.set_param(i, orig + eps);
            let up = m.loss(&x, &t);
            m.set_param(i, orig - eps);
            let down = m.loss(&x, &t);
            m.set_param(i, orig);
            let numeric = (up - down) / (2.0 * eps);
            let analytic = g.get(i);
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-8 {
                worst = worst.max((analytic - numeric).abs() / scale);
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-4, || format!("worst relative error {worst:.3e}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{checked} parameters of 17-5-24 sigmoid, worst relative error {worst:.2e}, {secs:.2}s"))
}

fn normalization(ds: &Dataset) -> Check {
    for s in &ds.samples {
        let p: f64 = s.env.proportions.iter().sum();
        ensure((p - 1.0).abs() <= 1e-9, || format!("sample {} has sum p = {p}", s.id))?;
        if s.has_demand() {
            let q: f64 = s.demand.hourly.iter().sum();
            ensure((q - 1.0).abs() <= 1e-9, || format!("sample {} has sum q = {q}", s.id))?;
        }
    }
    let max_d = ds.samples.iter().map(|s| s.env.density_norm).fold(0.0, f64::max);
    let max_c = ds.samples.iter().map(|s| s.demand.total_norm).fold(0.0, f64::max);
    ensure(max_d == 1.0 && max_c == 1.0, || format!("max density {max_d}, max total {max_c}"))?;
    Ok(format!("{} samples, sums within 1e-9, maxima exactly 1", ds.len()))
}

fn metric_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let gt = rng.random_range(0.1..1e4);
        ensure(accuracy_total(gt, gt) == Ok(1.0), || format!("total identity fails at {gt}"))?;
        let mut q: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= s);
        ensure(accuracy_dist(&q, &q) == Ok(1.0), || "distribution identity fails".into())?;
    }
    let mut e0 = vec![0.0; 24];
    e0[0] = 1.0;
    let uniform = vec![1.0 / 24.0; 24];
    let a = accuracy_dist(&e0, &uniform).map_err(|e| e.to_string())?;
    ensure((a + 11.0 / 12.0).abs() <= 1e-12, || format!("one-hot vs uniform gave {a}"))?;
    let neg = accuracy_total(10.0, 35.0).map_err(|e| e.to_string())?;
    ensure(neg == -1.5, || format!("overshoot gave {neg}"))?;
    Ok(format!("perfect = 1, one-hot vs uniform = {a:.15}, overshoot = {neg}"))
}

fn buffer_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let origin = GeoPoint { lon: 110.3, lat: 20.0 };
    let mut queries = 0;
    for inst in 0..100 {
        let n = rng.random_range(1..=1000);
        let span = rng.random_range(1_000.0..8_000.0);
        let radius = rng.random_range(100.0..2_000.0);
        let pts: Vec<GeoPoint> = (0..n)
            .map(|_| unproject(LocalXY { x: rng.random::<f64>() * span, y: rng.random::<f64>() * span }, origin))
            .collect();
        let index = BufferIndex::new(&pts, radius);
        for _ in 0..10 {
            let c = unproject(LocalXY { x: rng.random::<f64>() * span, y: rng.random::<f64>() * span }, origin);
            let a: BTreeSet<usize> = index.query(c, radius).into_iter().collect();
            let b: BTreeSet<usize> = points_in_buffer(c, &pts, radius).into_iter().collect();
            ensure(a == b, || format!("instance {inst}: index {} vs brute force {}", a.len(), b.len()))?;
            queries += 1;
        }
    }
    // the sampler itself against all-pairs counting
    let grid = GridSpec::parse_bbox("110.30,20.00,110.33,20.02", 200.0, 1000.0).map_err(|e| e.to_string())?;
    let centers = urbanflux_core::geo_grid::generate_centers(&grid).map_err(|e| e.to_string())?;
    let pois: Vec<PoiRecord> = (0..800)
        .map(|_| PoiRecord {
            location: GeoPoint {
                lon: 110.295 + rng.random::<f64>() * 0.04,
                lat: 19.995 + rng.random::<f64>() * 0.03,
            },
            category: Category::new(rng.random_range(0..16)).unwrap(),
        })
        .collect();
    let orders: Vec<TripOrder> = (0..1000)
        .map(|_| {
            let t = rng.random_range(0..30 * 86_400);
            TripOrder {
                pickup: GeoPoint {
                    lon: 110.295 + rng.random::<f64>() * 0.04,
                    lat: 19.995 + rng.random::<f64>() * 0.03,
                },
                pickup_ts: t,
                dropoff_ts: t + rng.random_range(60..5000),
            }
        })
        .collect();
    let raws = build_raw_samples(&centers, &pois, &orders, &grid, 30).map_err(|e| e.to_string())?;
    let poi_pts: Vec<GeoPoint> = pois.iter().map(|p| p.location).collect();
    let order_pts: Vec<GeoPoint> = orders.iter().map(|o| o.pickup).collect();
    for (c, s) in centers.iter().zip(&raws) {
        let mut counts = [0u32; 16];
        for i in points_in_buffer(*c, &poi_pts, 1000.0) {
            counts[pois[i].category.index()] += 1;
        }
        ensure(s.poi_counts == counts, || format!("counts differ at {c:?}"))?;
        let n = points_in_buffer(*c, &order_pts, 1000.0).len() as u64;
        ensure(s.orders_total == n, || format!("order count differs at {c:?}"))?;
    }
    Ok(format!("100 instances, {queries} queries, {} sampler buffers: exact set equality", centers.len()))
}

struct Trained {
    d: Box<dyn Predictor>,
    t: Box<dyn Predictor>,
    test: Dataset,
}

fn fit(train: &Dataset, test: &Dataset, target: Target, hidden: Vec<usize>) -> Result<(Box<dyn Predictor>, f64), String> {
    let c = mlp_candidate(target, Some(hidden), 800);
    let f = algorithms()
        .get("mlp")
        .unwrap()
        .fit(train, target, &c.config, None)
        .map_err(|e| e.to_string())?;
    let acc = median_accuracy(f.model.as_ref(), test).map_err(|e| e.to_string())?;
    Ok((f.model, acc))
}

fn learnability(ds: &Dataset, out: &mut Option<Trained>) -> Check {
    ensure(ds.len() >= 2000, || format!("only {} retained samples", ds.len()))?;
    let (tr, te) = holdout_split(ds.len(), 0.8, 1);
    let (train, test) = (ds.subset(&tr), ds.subset(&te));
    let start = Instant::now();
    let (d, d7) = fit(&train, &test, Target::Hourly, vec![82; 7])?;
    let (_, d2) = fit(&train, &test, Target::Hourly, vec![82; 2])?;
    let (t, t6) = fit(&train, &test, Target::Total, vec![36; 6])?;
    let (_, t2) = fit(&train, &test, Target::Total, vec![36; 2])?;
    let secs = start.elapsed().as_secs_f64();
    let line = format!(
        "{} samples; D 7x82 {d7:.4} (2x82 {d2:.4}), T 6x36 {t6:.4} (2x36 {t2:.4}), {secs:.0}s for all four",
        ds.len()
    );
    *out = Some(Trained { d, t, test });
    ensure(d7 >= 0.90, || format!("{line}: D below 0.90"))?;
    ensure(t6 >= 0.85, || format!("{line}: T below 0.85"))?;
    ensure(d7 > d2 && t6 > t2, || format!("{line}: deeper net does not beat two layers"))?;
    ensure(secs < 300.0, || format!("{line}: over 5 minutes"))?;
    Ok(line)
}

fn transfer(spec: &SynthSpec, home: &Dataset, trained: &Trained) -> Check {
    let shifted = spec.shifted();
    let city = gen_city(&shifted).map_err(|e| e.to_string())?;
    let (b, _) = sample_dataset(&shifted.grid, &city.pois, &city.orders, shifted.n_days, &CleanPolicy::default())
        .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for m in [&trained.d, &trained.t] {
        let held = median_accuracy(m.as_ref(), &trained.test).map_err(|e| e.to_string())?;
        let r = transfer_eval(m.as_ref(), "A", "B", &b, TransferNorm::Training, false).map_err(|e| e.to_string())?;
        ensure(r.median < held, || format!("{}: B {:.4} not below held-out A {held:.4}", m.target(), r.median))?;
        parts.push(format!("{} A {held:.4} > B {:.4}", m.target(), r.median));
    }
    for ds in [home, &b] {
        let days = ds.info.days as f64;
        let monthly: Vec<f64> = ds.samples.iter().map(|s| s.raw_total_vht * days).collect();
        // the fixed threshold, plus the median so both sides are populated
        for threshold in [ACTIVITY_THRESHOLD_HOURS, urbanflux_core::metrics::median(&monthly)] {
            let (u, a) = split_by_activity(ds, threshold);
            let ids = |d: &Dataset| d.samples.iter().map(|s| s.id).collect::<BTreeSet<u32>>();
            let (iu, ia, all) = (ids(&u), ids(&a), ids(ds));
            ensure(iu.is_disjoint(&ia) && iu.union(&ia).cloned().collect::<BTreeSet<_>>() == all, || {
                format!("split at {threshold} is not a partition")
            })?;
            ensure(u.samples.iter().all(|s| s.raw_total_vht * days <= threshold), || "sparse side misplaced".into())?;
            ensure(a.samples.iter().all(|s| s.raw_total_vht * days > threshold), || "dense side misplaced".into())?;
            parts.push(format!("split at {threshold:.0} h {}+{}={}", u.len(), a.len(), ds.len()));
        }
    }
    Ok(parts.join("; "))
}

fn ga_correctness() -> Check {
    let cs = ConstraintSet::new(NANDA);
    let cfg = GaConfig {
        seed: 9,
        ..Default::default()
    };

    // feasibility and elitist monotonicity, both encodings
    let fit = |c: &Counts| c.iter().enumerate().map(|(j, &v)| v as f64 * (j as f64 - 7.5)).sum::<f64>();
    let mut individuals = 0usize;
    let mut infeasible = 0usize;
    let full = CountEncoding { cs: cs.clone() };
    let out = run_with(&full, &cfg, &fit, |_, pop, ga| {
        for g in &pop.genes {
            individuals += 1;
            if !cs.is_satisfied(&ga.decode(g).unwrap()) {
                infeasible += 1;
            }
        }
    })
    .map_err(|e| e.to_string())?;
    ensure(out.history.windows(2).all(|w| w[1].best_fitness <= w[0].best_fitness), || "16-gene best fitness rose".into())?;
    let grouped = GroupedEncoding::new(cs.clone(), default_groups()).map_err(|e| e.to_string())?;
    let gout = run_with(&grouped, &cfg, &fit, |_, pop, ga| {
        for g in &pop.genes {
            individuals += 1;
            if !cs.is_satisfied(&ga.decode(g).unwrap()) {
                infeasible += 1;
            }
        }
    })
    .map_err(|e| e.to_string())?;
    ensure(gout.history.windows(2).all(|w| w[1].best_fitness <= w[0].best_fitness), || "grouped best fitness rose".into())?;
    ensure(infeasible == 0, || format!("{infeasible} of {individuals} individuals infeasible"))?;

    // exhaustive oracle: 4 genes, delta bound 2
    let mut small = cs.clone();
    small.delta_bound = 2;
    let enc = GroupedEncoding::new(small, default_groups()).map_err(|e| e.to_string())?;
    let w = [3.0, -1.0, 0.5, 2.0, 1.0, -2.0, 0.25, 4.0, -0.5, 1.5, -3.0, 0.75, 0.0, 2.5, -1.25, 0.1];
    let lin = move |c: &Counts| {
        let s: f64 = c.iter().zip(&w).map(|(&v, w)| v as f64 * w).sum();
        (s - 301.7).powi(2)
    };
    let mut order = Vec::new();
    let o = run_with(&enc, &cfg, &lin, |_, _, ga| order = ga.order().to_vec()).map_err(|e| e.to_string())?;
    let mut best = f64::INFINITY;
    for a in -2..=2 {
        for b in -2..=2 {
            for c in -2..=2 {
                for d in -2..=2 {
                    best = best.min(lin(&enc.decode(&[a, b, c, d], &order).unwrap()));
                }
            }
        }
    }
    ensure((o.best_fitness - best).abs() <= 1e-9, || format!("GA {} vs enumerated {best}", o.best_fitness))?;

    // toy problem with a known optimum
    let mut target = cs.base_counts;
    for (k, &j) in cs.free_indices().iter().enumerate() {
        target[j] += [17, -23, 31, -9, 0, 12, -40, 8, -6, 10, 5, -5, 0, 2, -2][k % 15];
    }
    let target = *repair(&target, &cs).map_err(|e| e.to_string())?.counts();
    let dist = move |c: &Counts| c.iter().zip(&target).map(|(a, b)| ((a - b) * (a - b)) as f64).sum::<f64>();
    let toy_cfg = GaConfig {
        generations: 200,
        seed: 11,
        ..Default::default()
    };
    let t = run_with(&full, &toy_cfg, &dist, |_, _, _| {}).map_err(|e| e.to_string())?;
    ensure(t.best_counts == target, || format!("toy optimum missed, fitness {}", t.best_fitness))?;
    let solved_at = t.history.iter().position(|h| h.best_fitness == 0.0).unwrap_or(usize::MAX);
    Ok(format!(
        "{individuals} individuals feasible, oracle optimum {best:.6} matched, toy solved by generation {solved_at}"
    ))
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for stage in STAGES.iter().filter(|s| **s != "cv") {
        for rel in stage_outputs(stage) {
            out.push((rel.to_string(), fs::read(dir.join(rel)).unwrap_or_default()));
        }
    }
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::small(5);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    Pipeline::new(cfg.clone(), &a, false).and_then(|p| p.run()).map_err(|e| e.to_string())?;
    Pipeline::new(cfg.clone(), &b, false).and_then(|p| p.run()).map_err(|e| e.to_string())?;
    let (xa, xb) = (artifacts(&a), artifacts(&b));
    let mut n = 0;
    for ((name, x), (_, y)) in xa.iter().zip(&xb) {
        ensure(!x.is_empty(), || format!("{name} missing"))?;
        ensure(x == y, || format!("{name} differs"))?;
        n += 1;
    }
    Ok(format!("{n} artifacts byte-identical across two runs of config {}", &cfg.hash()[..12]))
}

fn latency(trained: &Trained) -> Check {
    let env = EnvFeatures::from_counts(&NANDA.map(|c| c as f64), trained.t.norm_info()).ok_or("zero counts")?;
    let mut times = Vec::new();
    for _ in 0..2000 {
        let s = Instant::now();
        let p = predict_hybrid(trained.t.as_ref(), trained.d.as_ref(), &env).map_err(|e| e.to_string())?;
        times.push(s.elapsed());
        std::hint::black_box(p);
    }
    times.sort();
    let max = *times.last().unwrap();
    let p50 = times[times.len() / 2];
    ensure(max < Duration::from_millis(10), || format!("slowest call {max:?}"))?;
    Ok(format!("2000 calls with 6x36 and 7x82: median {p50:?}, max {max:?}"))
}

/// Not a pass/fail criterion: per-generation cost of the two encodings on a model objective.
fn grouped_speed(trained: &Trained) -> String {
    let cs = ConstraintSet::new(NANDA);
    let obj = objectives().get("min_peak").unwrap();
    let fit = model_fitness(trained.t.as_ref(), trained.d.as_ref(), obj.as_ref());
    let cfg = GaConfig {
        generations: 50,
        seed: 2,
        ..Default::default()
    };
    let time = |f: &dyn Fn() -> usize| {
        let s = Instant::now();
        let evals = f();
        (s.elapsed().as_secs_f64() * 1e3 / 50.0, evals)
    };
    let full = CountEncoding { cs: cs.clone() };
    let grouped = GroupedEncoding::new(cs.clone(), default_groups()).unwrap();
    let (ms16, e16) = time(&|| run_with(&full, &cfg, &fit, |_, _, _| {}).unwrap().evaluations);
    let (ms4, e4) = time(&|| run_with(&grouped, &cfg, &fit, |_, _, _| {}).unwrap().evaluations);
    format!("16 genes {ms16:.2} ms/gen ({e16} evaluations), grouped {ms4:.2} ms/gen ({e4} evaluations)")
}

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    match r {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail}");
            false
        }
    }
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let started = Instant::now();
    let spec = SynthSpec::default_city(7);
    let city = gen_city(&spec).expect("default synthetic city");
    let centers = urbanflux_core::geo_grid::generate_centers(&spec.grid).expect("centers");
    let raws = build_raw_samples(&centers, &city.pois, &city.orders, &spec.grid, spec.n_days).expect("raw samples");
    let ds = normalize(&clean(raws, &CleanPolicy::default()).expect("clean").samples).expect("normalize");

    let mut ok = vec![
        run("gradient correctness", gradients),
        run("normalization invariants", || normalization(&ds)),
        run("metric identities", metric_identities),
        run("buffer sampling oracle", buffer_oracle),
    ];
    let mut trained = None;
    ok.push(run("synthetic learnability", || learnability(&ds, &mut trained)));
    match &trained {
        Some(t) => ok.push(run("transfer", || transfer(&spec, &ds, t))),
        None => ok.push(run("transfer", || Err("no trained models".into()))),
    }
    ok.push(run("GA correctness", ga_correctness));
    ok.push(run("determinism", determinism));
    match &trained {
        Some(t) => {
            ok.push(run("prediction latency", || latency(t)));
            println!("INFO grouped GA timing: {}", grouped_speed(t));
        }
        None => ok.push(run("prediction latency", || Err("no trained models".into()))),
    }
    let passed = ok.iter().filter(|&&b| b).count();
    println!("acceptance: {passed}/{} passed in {:.0}s", ok.len(), started.elapsed().as_secs_f64());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
