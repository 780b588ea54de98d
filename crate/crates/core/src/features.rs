//! Per-buffer environment and demand features.
//!
//! Environment: normalized density `X/D` followed by the 16 category
//! proportions `x_j / X`. Demand: normalized daily VHT `c/C_max` and the 24
//! hourly shares `c_i / c`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_grid::{BufferIndex, GeoPoint, GridSpec};
use crate::ingest::{PoiRecord, TripOrder, HOURS, NUM_CATEGORIES};

/// Width of the model input vector.
pub const ENV_WIDTH: usize = NUM_CATEGORIES + 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no samples survive cleaning ({removed_no_poi} without POIs, {removed_low_activity} below the order-rate threshold)")]
    EmptyDataset {
        removed_no_poi: usize,
        removed_low_activity: usize,
    },
    #[error("dataset has no travel demand (C_max = 0)")]
    ZeroDemand,
    #[error("days must be >= 1")]
    ZeroDays,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format error: {0}")]
    Format(String),
}

/// Counts aggregated over one sampling buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub center: GeoPoint,
    pub poi_counts: [u32; NUM_CATEGORIES],
    pub density_proxy: u32,
    /// Daily-average VHT per pickup hour, in hours.
    pub vht_by_hour: [f64; HOURS],
    /// Daily-average VHT, in hours.
    pub vht_total: f64,
    /// Orders over the whole observation window.
    pub orders_total: u64,
    pub days: u32,
}

impl RawSample {
    /// Mean orders per hour over the observation window.
    pub fn order_rate_per_hour(&self) -> f64 {
        self.orders_total as f64 / (24.0 * self.days as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvFeatures {
    pub density_norm: f64,
    pub proportions: [f64; NUM_CATEGORIES],
}

impl EnvFeatures {
    /// Features for arbitrary counts under a frozen normalization.
    /// Returns `None` when every count is zero.
    pub fn from_counts(counts: &[f64; NUM_CATEGORIES], info: &NormalizationInfo) -> Option<Self> {
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut proportions = [0.0; NUM_CATEGORIES];
        for (p, c) in proportions.iter_mut().zip(counts) {
            *p = c / total;
        }
        Some(EnvFeatures {
            density_norm: total / info.d_max,
            proportions,
        })
    }

    pub fn to_vec(&self) -> [f64; ENV_WIDTH] {
        let mut v = [0.0; ENV_WIDTH];
        v[0] = self.density_norm;
        v[1..].copy_from_slice(&self.proportions);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandFeatures {
    pub total_norm: f64,
    pub hourly: [f64; HOURS],
}

/// Scale constants frozen with a training dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    /// Largest POI count over retained samples.
    pub d_max: f64,
    /// Largest daily VHT over retained samples, in hours.
    pub c_max: f64,
    pub days: u32,
}

/// Cleaning thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanPolicy {
    #[serde(default = "default_min_rate")]
    pub min_orders_per_hour: f64,
}

fn default_min_rate() -> f64 {
    1.0
}

impl Default for CleanPolicy {
    fn default() -> Self {
        CleanPolicy {
            min_orders_per_hour: default_min_rate(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CleanOutcome {
    pub samples: Vec<RawSample>,
    pub removed_no_poi: usize,
    pub removed_low_activity: usize,
}

/// One retained sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u32,
    pub center: GeoPoint,
    pub env: EnvFeatures,
    pub demand: DemandFeatures,
    pub counts: [u32; NUM_CATEGORIES],
    /// Daily-average VHT in hours.
    pub raw_total_vht: f64,
}

impl Sample {
    /// False when the sample has no demand and its hourly shares are undefined.
    pub fn has_demand(&self) -> bool {
        self.raw_total_vht > 0.0
    }

    pub fn raw_hourly_vht(&self) -> [f64; HOURS] {
        let mut v = self.demand.hourly;
        for x in v.iter_mut() {
            *x *= self.raw_total_vht;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub info: NormalizationInfo,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Rows at `indices`, sharing this dataset's normalization.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            info: self.info,
        }
    }

    pub fn get(&self, id: u32) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Recomputes the scale-dependent features under another normalization.
    /// Proportions and hourly shares are unaffected.
    pub fn renormalized(&self, info: NormalizationInfo) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let density: u32 = s.counts.iter().sum();
                let mut s = s.clone();
                s.env.density_norm = density as f64 / info.d_max;
                s.demand.total_norm = s.raw_total_vht / info.c_max;
                s
            })
            .collect();
        Dataset { samples, info }
    }
}

/// Aggregates POIs and orders into one raw sample per center.
///
/// Durations are summed as integer seconds so the result does not depend on
/// the order of `pois` or `orders`.
pub fn build_raw_samples(
    centers: &[GeoPoint],
    pois: &[PoiRecord],
    orders: &[TripOrder],
    spec: &GridSpec,
    days: u32,
) -> Result<Vec<RawSample>, FeatureError> {
    if days == 0 {
        return Err(FeatureError::ZeroDays);
    }
    let radius = spec.buffer_radius_m;
    let poi_pts: Vec<GeoPoint> = pois.iter().map(|p| p.location).collect();
    let order_pts: Vec<GeoPoint> = orders.iter().map(|o| o.pickup).collect();
    let poi_index = BufferIndex::new(&poi_pts, radius);
    let order_index = BufferIndex::new(&order_pts, radius);

    Ok(centers
        .par_iter()
        .map(|&center| {
            let mut counts = [0u32; NUM_CATEGORIES];
            for i in poi_index.query(center, radius) {
                counts[pois[i].category.index()] += 1;
            }
            let mut secs = [0i64; HOURS];
            let hits = order_index.query(center, radius);
            for &i in &hits {
                let o = &orders[i];
                secs[o.hour_bucket()] += o.duration_secs();
            }
            raw_from_parts(center, counts, secs, hits.len() as u64, days)
        })
        .collect())
}

pub(crate) fn raw_from_parts(
    center: GeoPoint,
    poi_counts: [u32; NUM_CATEGORIES],
    secs_by_hour: [i64; HOURS],
    orders_total: u64,
    days: u32,
) -> RawSample {
    let scale = 3600.0 * days as f64;
    let mut vht_by_hour = [0.0; HOURS];
    for (v, s) in vht_by_hour.iter_mut().zip(secs_by_hour) {
        *v = s as f64 / scale;
    }
    let total_secs: i64 = secs_by_hour.iter().sum();
    RawSample {
        center,
        poi_counts,
        density_proxy: poi_counts.iter().sum(),
        vht_by_hour,
        vht_total: total_secs as f64 / scale,
        orders_total,
        days,
    }
}

/// Drops buffers without POIs or with fewer than the policy's mean orders per hour.
pub fn clean(samples: Vec<RawSample>, policy: &CleanPolicy) -> Result<CleanOutcome, FeatureError> {
    let mut removed_no_poi = 0;
    let mut removed_low_activity = 0;
    let kept: Vec<RawSample> = samples
        .into_iter()
        .filter(|s| {
            if s.density_proxy == 0 {
                removed_no_poi += 1;
                false
            } else if s.order_rate_per_hour() < policy.min_orders_per_hour {
                removed_low_activity += 1;
                false
            } else {
                true
            }
        })
        .collect();
    if kept.is_empty() {
        return Err(FeatureError::EmptyDataset {
            removed_no_poi,
            removed_low_activity,
        });
    }
    Ok(CleanOutcome {
        samples: kept,
        removed_no_poi,
        removed_low_activity,
    })
}

/// Computes `D` and `C_max` over `samples` and builds the dataset.
pub fn normalize(samples: &[RawSample]) -> Result<Dataset, FeatureError> {
    let Some(first) = samples.first() else {
        return Err(FeatureError::EmptyDataset {
            removed_no_poi: 0,
            removed_low_activity: 0,
        });
    };
    let d_max = samples.iter().map(|s| s.density_proxy).max().unwrap_or(0);
    let c_max = samples.iter().map(|s| s.vht_total).fold(0.0, f64::max);
    if d_max == 0 {
        return Err(FeatureError::EmptyDataset {
            removed_no_poi: samples.len(),
            removed_low_activity: 0,
        });
    }
    if c_max <= 0.0 {
        return Err(FeatureError::ZeroDemand);
    }
    let info = NormalizationInfo {
        d_max: d_max as f64,
        c_max,
        days: first.days,
    };
    Ok(normalize_with(samples, info))
}

/// Builds a dataset under fixed normalization constants.
pub fn normalize_with(samples: &[RawSample], info: NormalizationInfo) -> Dataset {
    let rows = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let x = s.density_proxy as f64;
            let mut proportions = [0.0; NUM_CATEGORIES];
            if s.density_proxy > 0 {
                for (p, &c) in proportions.iter_mut().zip(&s.poi_counts) {
                    *p = c as f64 / x;
                }
            }
            let mut hourly = [0.0; HOURS];
            if s.vht_total > 0.0 {
                for (q, &c) in hourly.iter_mut().zip(&s.vht_by_hour) {
                    *q = c / s.vht_total;
                }
            }
            Sample {
                id: i as u32,
                center: s.center,
                env: EnvFeatures {
                    density_norm: x / info.d_max,
                    proportions,
                },
                demand: DemandFeatures {
                    total_norm: s.vht_total / info.c_max,
                    hourly,
                },
                counts: s.poi_counts,
                raw_total_vht: s.vht_total,
            }
        })
        .collect();
    Dataset { samples: rows, info }
}

pub fn denormalize_total(total_norm: f64, info: &NormalizationInfo) -> f64 {
    total_norm * info.c_max
}

/// Sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub norm_info: NormalizationInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<crate::Provenance>,
}

pub fn dataset_header() -> Vec<String> {
    let mut h = vec![
        "sample_id".to_string(),
        "lon".into(),
        "lat".into(),
        "density_norm".into(),
    ];
    h.extend((0..NUM_CATEGORIES).map(|j| format!("p{j:02}")));
    h.push("total_norm".into());
    h.extend((0..HOURS).map(|i| format!("q{i:02}")));
    h.push("raw_total_vht".into());
    h
}

fn fmt_f64(x: f64) -> String {
    // shortest representation that round-trips
    format!("{x:?}")
}

pub fn write_dataset<W: Write>(w: W, ds: &Dataset) -> Result<(), FeatureError> {
    let mut wtr = csv::Writer::from_writer(w);
    let fmt_err = |e: csv::Error| FeatureError::Format(e.to_string());
    wtr.write_record(dataset_header()).map_err(fmt_err)?;
    for s in &ds.samples {
        let mut rec = vec![
            s.id.to_string(),
            fmt_f64(s.center.lon),
            fmt_f64(s.center.lat),
            fmt_f64(s.env.density_norm),
        ];
        rec.extend(s.env.proportions.iter().map(|&v| fmt_f64(v)));
        rec.push(fmt_f64(s.demand.total_norm));
        rec.extend(s.demand.hourly.iter().map(|&v| fmt_f64(v)));
        rec.push(fmt_f64(s.raw_total_vht));
        wtr.write_record(&rec).map_err(fmt_err)?;
    }
    wtr.flush().map_err(|e| FeatureError::Format(e.to_string()))
}

/// Reads a dataset CSV. Category counts are recovered from
/// `density_norm * D * p_j`, which is exact for integer counts.
pub fn read_dataset<R: Read>(r: R, info: NormalizationInfo) -> Result<Dataset, FeatureError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| FeatureError::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != dataset_header() {
        return Err(FeatureError::Format("unexpected dataset header".into()));
    }
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| FeatureError::Format(format!("line {line}: {e}")))?;
        let num = |k: usize| -> Result<f64, FeatureError> {
            rec.get(k)
                .ok_or_else(|| FeatureError::Format(format!("line {line}: missing column {k}")))?
                .parse::<f64>()
                .map_err(|e| FeatureError::Format(format!("line {line}, column {k}: {e}")))
        };
        let id = rec
            .get(0)
            .unwrap_or_default()
            .parse::<u32>()
            .map_err(|e| FeatureError::Format(format!("line {line}: sample_id: {e}")))?;
        let density_norm = num(3)?;
        let mut proportions = [0.0; NUM_CATEGORIES];
        for (j, p) in proportions.iter_mut().enumerate() {
            *p = num(4 + j)?;
        }
        let total_norm = num(4 + NUM_CATEGORIES)?;
        let mut hourly = [0.0; HOURS];
        for (h, q) in hourly.iter_mut().enumerate() {
            *q = num(5 + NUM_CATEGORIES + h)?;
        }
        let raw_total_vht = num(5 + NUM_CATEGORIES + HOURS)?;
        let density = density_norm * info.d_max;
        let mut counts = [0u32; NUM_CATEGORIES];
        for (c, p) in counts.iter_mut().zip(&proportions) {
            *c = (p * density).round().max(0.0) as u32;
        }
        samples.push(Sample {
            id,
            center: GeoPoint {
                lon: num(1)?,
                lat: num(2)?,
            },
            env: EnvFeatures {
                density_norm,
                proportions,
            },
            demand: DemandFeatures { total_norm, hourly },
            counts,
            raw_total_vht,
        });
    }
    Ok(Dataset { samples, info })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Sidecar path for a dataset CSV: `dataset.csv` → `dataset.norm.json`.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("norm.json")
}

pub fn save_dataset(
    path: &Path,
    ds: &Dataset,
    provenance: Option<crate::Provenance>,
) -> Result<(), FeatureError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_dataset(BufWriter::new(f), ds)?;
    let side = DatasetSidecar {
        norm_info: ds.info,
        provenance,
    };
    let side_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&side).map_err(|e| FeatureError::Format(e.to_string()))?;
    std::fs::write(&side_path, json + "\n").map_err(io_err(&side_path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FeatureError> {
    let side_path = sidecar_path(path);
    let side_bytes = std::fs::read(&side_path).map_err(io_err(&side_path))?;
    let side: DatasetSidecar =
        serde_json::from_slice(&side_bytes).map_err(|e| FeatureError::Format(e.to_string()))?;
    let f = File::open(path).map_err(io_err(path))?;
    read_dataset(BufReader::new(f), side.norm_info)
}
