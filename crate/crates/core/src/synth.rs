//! Synthetic city generator with known expected demand.
//!
//! Every POI emits taxi orders at its own location. A POI of category `j`
//! produces on average `gain * rate_j * f` orders per day, where `f` is a
//! per-POI lognormal factor (`noise`), with pickup hours drawn from
//! `profile_j` and gamma-distributed trip durations of mean
//! `mean_duration_s[j]`. A buffer's expected hourly VHT is therefore a sum
//! over the POIs it contains.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_grid::{generate_centers, unproject, BufferIndex, GeoError, GeoPoint, GridSpec, LocalXY};
use crate::ingest::{write_orders_csv, write_poi_csv, Category, IngestError, PoiRecord, TripOrder, HOURS, MAX_TRIP_SECS, NUM_CATEGORIES};

/// 2017-11-01T00:00:00Z; day 0 of every synthetic observation window.
pub const EPOCH_START: i64 = 1_509_494_400;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("cannot write {path}: {msg}")]
    Write { path: String, msg: String },
}

/// One Gaussian POI cluster, positioned relative to the bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub category: usize,
    /// Fractions of the box width/height, measured from `min`.
    pub fx: f64,
    pub fy: f64,
    pub spread_m: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub grid: GridSpec,
    pub n_poi: usize,
    pub n_days: u32,
    /// Share of POIs per category.
    pub category_mix: [f64; NUM_CATEGORIES],
    /// Share of POIs scattered uniformly instead of drawn from clusters.
    pub background_share: f64,
    pub clusters: Vec<Cluster>,
    pub profiles: [[f64; HOURS]; NUM_CATEGORIES],
    /// Relative orders per POI per day.
    pub rates: [f64; NUM_CATEGORIES],
    pub mean_duration_s: [f64; NUM_CATEGORIES],
    pub duration_shape: f64,
    pub gain: f64,
    /// Sigma of the per-POI lognormal rate factor.
    pub noise: f64,
    pub seed: u64,
}

fn bump(h: f64, mu: f64, sigma: f64) -> f64 {
    // circular distance on the 24 h clock
    let d = (h - mu).abs();
    let d = d.min(24.0 - d);
    (-0.5 * (d / sigma).powi(2)).exp()
}

/// Normalized mixture of hour-of-day bumps over a small night floor.
pub fn profile_from_peaks(peaks: &[(f64, f64, f64)], floor: f64) -> [f64; HOURS] {
    let mut p = [0.0; HOURS];
    for (h, v) in p.iter_mut().enumerate() {
        let t = h as f64 + 0.5;
        *v = floor + peaks.iter().map(|&(mu, s, a)| a * bump(t, mu, s)).sum::<f64>();
    }
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

fn default_profiles() -> [[f64; HOURS]; NUM_CATEGORIES] {
    let peaks: [&[(f64, f64, f64)]; NUM_CATEGORIES] = [
        &[(10.0, 2.0, 1.0), (15.5, 2.0, 0.8)],
        &[(12.0, 1.2, 1.0), (18.5, 1.5, 1.6)],
        &[(15.0, 2.5, 1.0), (20.0, 1.5, 1.2)],
        &[(10.0, 2.0, 0.8), (17.0, 2.0, 1.0)],
        &[(19.5, 1.5, 1.4), (9.0, 1.5, 0.6)],
        &[(9.0, 1.5, 1.4), (14.5, 1.5, 0.8)],
        &[(8.0, 1.5, 0.7), (21.5, 1.5, 1.2)],
        &[(11.0, 2.5, 1.0), (16.0, 2.0, 0.9)],
        &[(7.5, 1.0, 1.6), (18.0, 1.5, 1.0), (22.0, 1.5, 0.5)],
        &[(8.5, 1.0, 1.2), (17.5, 1.0, 1.8)],
        &[(9.0, 1.2, 1.0), (16.5, 1.2, 1.0)],
        &[(7.5, 1.0, 1.5), (16.5, 1.2, 1.1)],
        &[(7.0, 2.0, 1.0), (13.0, 3.0, 0.6), (21.0, 2.0, 1.0)],
        &[(8.0, 1.0, 1.5), (18.0, 1.0, 1.5)],
        &[(10.0, 1.5, 1.0), (15.5, 1.5, 1.0)],
        &[(13.0, 4.0, 1.0)],
    ];
    let mut out = [[0.0; HOURS]; NUM_CATEGORIES];
    for (o, p) in out.iter_mut().zip(peaks) {
        *o = profile_from_peaks(p, 0.05);
    }
    out
}

fn default_clusters(seed: u64) -> Vec<Cluster> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1u64);
    let mut out = Vec::new();
    for category in 0..NUM_CATEGORIES {
        for _ in 0..3 {
            out.push(Cluster {
                category,
                fx: rng.random::<f64>(),
                fy: rng.random::<f64>(),
                spread_m: 500.0 + 1500.0 * rng.random::<f64>(),
                weight: 0.5 + rng.random::<f64>(),
            });
        }
    }
    out
}

impl SynthSpec {
    /// Roughly 12 km by 9 km of Haikou's urban core, 2806 buffer centers.
    pub fn default_city(seed: u64) -> Self {
        let min = GeoPoint { lon: 110.30, lat: 19.98 };
        let max = unproject(LocalXY { x: 12_000.0, y: 9_000.0 }, min);
        SynthSpec {
            grid: GridSpec::new(min, max),
            n_poi: 20_000,
            n_days: 30,
            category_mix: [
                0.05, 0.16, 0.12, 0.12, 0.04, 0.04, 0.05, 0.02, 0.08, 0.10, 0.03, 0.05, 0.01, 0.04, 0.03, 0.06,
            ],
            background_share: 0.35,
            clusters: default_clusters(seed),
            profiles: default_profiles(),
            rates: [
                0.6, 1.4, 1.0, 0.7, 0.8, 1.2, 1.5, 1.1, 1.3, 1.6, 0.5, 0.9, 3.0, 2.0, 0.6, 0.4,
            ],
            mean_duration_s: [
                900.0, 840.0, 1080.0, 780.0, 960.0, 1200.0, 1500.0, 1800.0, 1140.0, 1320.0, 1020.0, 1080.0, 1980.0,
                1260.0, 900.0, 840.0,
            ],
            duration_shape: 4.0,
            gain: 4.0,
            noise: 0.05,
            seed,
        }
    }

    /// A smaller box for quick runs: about 4 km by 3 km.
    pub fn small_city(seed: u64) -> Self {
        let mut s = Self::default_city(seed);
        s.grid.max = unproject(LocalXY { x: 4_000.0, y: 3_000.0 }, s.grid.min);
        s.n_poi = 2_500;
        s.n_days = 7;
        s.gain = 1.0;
        s
    }

    /// Same generator over a neighbouring box, with rotated diurnal
    /// profiles, re-weighted rates and a different gain. Models fitted on
    /// `self` see a distribution shift here.
    pub fn shifted(&self) -> Self {
        let mut s = self.clone();
        let ext = self.grid.extent_m();
        s.grid.min = unproject(LocalXY { x: ext.x + 5_000.0, y: 0.0 }, self.grid.min);
        s.grid.max = unproject(LocalXY { x: 2.0 * ext.x + 5_000.0, y: ext.y }, self.grid.min);
        for (j, p) in s.profiles.iter_mut().enumerate() {
            p.rotate_right(2 + j % 3);
        }
        s.rates.reverse();
        s.gain = self.gain * 1.8;
        s.category_mix.rotate_left(3);
        s.seed = self.seed.wrapping_add(1_000_003);
        s.clusters = default_clusters(s.seed);
        s
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.grid.validate()?;
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.n_poi < NUM_CATEGORIES {
            return bad("n_poi must be >= 16");
        }
        if self.n_days == 0 {
            return bad("n_days must be >= 1");
        }
        for p in &self.profiles {
            if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("each profile must be a probability vector");
            }
        }
        if self.category_mix.iter().any(|v| !(*v >= 0.0)) || self.category_mix.iter().sum::<f64>() <= 0.0 {
            return bad("category_mix must be non-negative with positive sum");
        }
        if self.rates.iter().any(|v| !(*v >= 0.0)) || self.mean_duration_s.iter().any(|v| !(*v > 0.0)) {
            return bad("rates must be >= 0 and durations > 0");
        }
        if !(self.gain >= 0.0) || !(self.noise >= 0.0) || !(self.duration_shape > 0.0) {
            return bad("gain and noise must be >= 0, duration_shape > 0");
        }
        if !(0.0..=1.0).contains(&self.background_share) {
            return bad("background_share must be in [0, 1]");
        }
        if self.clusters.iter().any(|c| c.category >= NUM_CATEGORIES || !(c.spread_m > 0.0) || !(c.weight > 0.0)) {
            return bad("clusters need a valid category, spread and weight");
        }
        Ok(())
    }

    /// Expected daily orders for a POI of category `j` with rate factor `f`.
    fn daily_orders(&self, j: usize, f: f64) -> f64 {
        self.gain * self.rates[j] * f
    }
}

/// Expected daily-average VHT per hour for one buffer, in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub lon: f64,
    pub lat: f64,
    pub hourly_vht: [f64; HOURS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub days: u32,
    pub buffers: Vec<TruthRow>,
}

#[derive(Debug, Clone)]
pub struct SynthCity {
    pub pois: Vec<PoiRecord>,
    pub orders: Vec<TripOrder>,
    pub truth: Truth,
}

fn sample_category(mix: &[f64; NUM_CATEGORIES], u: f64) -> usize {
    let total: f64 = mix.iter().sum();
    let mut acc = 0.0;
    for (j, m) in mix.iter().enumerate() {
        acc += m / total;
        if u < acc {
            return j;
        }
    }
    mix.iter().rposition(|&m| m > 0.0).unwrap_or(0)
}

fn sample_hour(profile: &[f64; HOURS], u: f64) -> usize {
    let mut acc = 0.0;
    for (h, p) in profile.iter().enumerate() {
        acc += p;
        if u < acc {
            return h;
        }
    }
    HOURS - 1
}

/// POIs, each with its lognormal rate factor.
fn place_pois(spec: &SynthSpec) -> Vec<(PoiRecord, f64)> {
    let margin = spec.grid.buffer_radius_m;
    let ext = spec.grid.extent_m();
    let origin = spec.grid.min;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let factor = LogNormal::new(-0.5 * spec.noise * spec.noise, spec.noise).expect("sigma >= 0");
    (0..spec.n_poi)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(2 * i as u64);
            let j = sample_category(&spec.category_mix, rng.random());
            let clusters: Vec<&Cluster> = spec.clusters.iter().filter(|c| c.category == j).collect();
            let uniform = |rng: &mut ChaCha8Rng| LocalXY {
                x: -margin + rng.random::<f64>() * (ext.x + 2.0 * margin),
                y: -margin + rng.random::<f64>() * (ext.y + 2.0 * margin),
            };
            let xy = if clusters.is_empty() || rng.random::<f64>() < spec.background_share {
                uniform(&mut rng)
            } else {
                let total: f64 = clusters.iter().map(|c| c.weight).sum();
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = clusters[clusters.len() - 1];
                for c in &clusters {
                    acc += c.weight;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                LocalXY {
                    x: pick.fx * ext.x + pick.spread_m * normal.sample(&mut rng),
                    y: pick.fy * ext.y + pick.spread_m * normal.sample(&mut rng),
                }
            };
            let f = if spec.noise > 0.0 { factor.sample(&mut rng) } else { 1.0 };
            (
                PoiRecord {
                    location: unproject(xy, origin),
                    category: Category::new(j).expect("index < 16"),
                },
                f,
            )
        })
        .collect()
}

fn emit_orders(spec: &SynthSpec, i: usize, poi: &PoiRecord, f: f64) -> Vec<TripOrder> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 * i as u64 + 1);
    let j = poi.category.index();
    let lambda = spec.daily_orders(j, f) * spec.n_days as f64;
    let n = if lambda > 0.0 {
        Poisson::new(lambda).expect("positive rate").sample(&mut rng) as u64
    } else {
        0
    };
    let dur = Gamma::new(spec.duration_shape, spec.mean_duration_s[j] / spec.duration_shape).expect("positive params");
    (0..n)
        .map(|_| {
            let day = rng.random_range(0..spec.n_days) as i64;
            let hour = sample_hour(&spec.profiles[j], rng.random()) as i64;
            let sec = rng.random_range(0..3600) as i64;
            let pickup_ts = EPOCH_START + day * 86_400 + hour * 3600 + sec;
            let d = (dur.sample(&mut rng).round() as i64).clamp(1, MAX_TRIP_SECS);
            TripOrder {
                pickup: poi.location,
                pickup_ts,
                dropoff_ts: pickup_ts + d,
            }
        })
        .collect()
}

/// Expected hourly VHT (hours per day) for every buffer center of the grid.
fn expected_truth(spec: &SynthSpec, pois: &[(PoiRecord, f64)]) -> Result<Truth, SynthError> {
    let centers = generate_centers(&spec.grid)?;
    let pts: Vec<GeoPoint> = pois.iter().map(|(p, _)| p.location).collect();
    let index = BufferIndex::new(&pts, spec.grid.buffer_radius_m);
    let buffers = centers
        .par_iter()
        .map(|&c| {
            let mut hourly = [0.0; HOURS];
            for i in index.query(c, spec.grid.buffer_radius_m) {
                let (poi, f) = &pois[i];
                let j = poi.category.index();
                let vht = spec.daily_orders(j, *f) * spec.mean_duration_s[j] / 3600.0;
                for (v, p) in hourly.iter_mut().zip(&spec.profiles[j]) {
                    *v += vht * p;
                }
            }
            TruthRow {
                lon: c.lon,
                lat: c.lat,
                hourly_vht: hourly,
            }
        })
        .collect();
    Ok(Truth {
        days: spec.n_days,
        buffers,
    })
}

pub fn gen_city(spec: &SynthSpec) -> Result<SynthCity, SynthError> {
    spec.validate()?;
    let placed = place_pois(spec);
    let orders: Vec<TripOrder> = placed
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, (p, f))| emit_orders(spec, i, p, *f))
        .collect();
    let truth = expected_truth(spec, &placed)?;
    Ok(SynthCity {
        pois: placed.into_iter().map(|(p, _)| p).collect(),
        orders,
        truth,
    })
}

/// Writes `poi.csv`, `orders.csv` and `truth.json` into `dir`.
pub fn write_city(city: &SynthCity, dir: &Path) -> Result<(), SynthError> {
    let werr = |p: &Path, e: &dyn std::fmt::Display| SynthError::Write {
        path: p.display().to_string(),
        msg: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| werr(dir, &e))?;
    write_poi_csv(&dir.join("poi.csv"), &city.pois)?;
    write_orders_csv(&dir.join("orders.csv"), &city.orders)?;
    let tp = dir.join("truth.json");
    let json = serde_json::to_string(&city.truth).map_err(|e| werr(&tp, &e))?;
    std::fs::write(&tp, json + "\n").map_err(|e| werr(&tp, &e))
}
