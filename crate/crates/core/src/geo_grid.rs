//! Local planar geometry for the sampling lattice.
//!
//! Coordinates are treated as a self-consistent planar datum and projected
//! with an equirectangular approximation around a fixed origin. At city
//! scale the distortion is far below the 200 m sampling step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by the local projection, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

const DEG: f64 = std::f64::consts::PI / 180.0;

// Tolerance for lattice edges, in meters. Corner coordinates that come from
// a round trip through `unproject` can land a few nanometers short.
const EDGE_EPS_M: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate ({lon}, {lat})")]
    InvalidCoordinate { lon: f64, lat: f64 },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("grid extent {width_m:.1} m x {height_m:.1} m spans less than one {step_m} m step")]
    DegenerateExtent {
        width_m: f64,
        height_m: f64,
        step_m: f64,
    },
}

/// A longitude/latitude pair in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lon, lat };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(GeoError::InvalidCoordinate { lon, lat })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }
}

/// Meters east (`x`) and north (`y`) of a projection origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalXY {
    pub x: f64,
    pub y: f64,
}

impl LocalXY {
    pub fn dist2(&self, other: &LocalXY) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

pub fn project(p: GeoPoint, origin: GeoPoint) -> LocalXY {
    let k = EARTH_RADIUS_M * DEG;
    LocalXY {
        x: (p.lon - origin.lon) * (origin.lat * DEG).cos() * k,
        y: (p.lat - origin.lat) * k,
    }
}

/// Inverse of [`project`] for the same origin.
pub fn unproject(xy: LocalXY, origin: GeoPoint) -> GeoPoint {
    let k = EARTH_RADIUS_M * DEG;
    GeoPoint {
        lon: origin.lon + xy.x / ((origin.lat * DEG).cos() * k),
        lat: origin.lat + xy.y / k,
    }
}

/// Bounding box plus sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: GeoPoint,
    pub max: GeoPoint,
    #[serde(default = "default_step")]
    pub step_m: f64,
    #[serde(default = "default_radius")]
    pub buffer_radius_m: f64,
}

fn default_step() -> f64 {
    200.0
}

fn default_radius() -> f64 {
    1000.0
}

impl GridSpec {
    /// Box with the default 200 m step and 1 km buffer.
    pub fn new(min: GeoPoint, max: GeoPoint) -> Self {
        GridSpec {
            min,
            max,
            step_m: default_step(),
            buffer_radius_m: default_radius(),
        }
    }

    /// Parses `min_lon,min_lat,max_lon,max_lat`.
    pub fn parse_bbox(s: &str, step_m: f64, buffer_radius_m: f64) -> Result<Self, GeoError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeoError::InvalidSpec(format!("bbox `{s}`: {e}")))?;
        if parts.len() != 4 {
            return Err(GeoError::InvalidSpec(format!(
                "bbox `{s}` must have 4 comma-separated values"
            )));
        }
        let spec = GridSpec {
            min: GeoPoint::new(parts[0], parts[1])?,
            max: GeoPoint::new(parts[2], parts[3])?,
            step_m,
            buffer_radius_m,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        for p in [self.min, self.max] {
            if !p.is_valid() {
                return Err(GeoError::InvalidCoordinate { lon: p.lon, lat: p.lat });
            }
        }
        if !(self.min.lon < self.max.lon && self.min.lat < self.max.lat) {
            return Err(GeoError::InvalidSpec("min corner must be south-west of max".into()));
        }
        if !(self.step_m > 0.0 && self.step_m.is_finite()) {
            return Err(GeoError::InvalidSpec(format!("step_m = {}", self.step_m)));
        }
        if !(self.buffer_radius_m > 0.0 && self.buffer_radius_m.is_finite()) {
            return Err(GeoError::InvalidSpec(format!(
                "buffer_radius_m = {}",
                self.buffer_radius_m
            )));
        }
        Ok(())
    }

    /// Projected extent of the box relative to `min`.
    pub fn extent_m(&self) -> LocalXY {
        project(self.max, self.min)
    }

    /// Number of lattice columns and rows.
    pub fn lattice_dims(&self) -> Result<(usize, usize), GeoError> {
        self.validate()?;
        let ext = self.extent_m();
        if ext.x + EDGE_EPS_M < self.step_m || ext.y + EDGE_EPS_M < self.step_m {
            return Err(GeoError::DegenerateExtent {
                width_m: ext.x,
                height_m: ext.y,
                step_m: self.step_m,
            });
        }
        let nx = ((ext.x + EDGE_EPS_M) / self.step_m).floor() as usize + 1;
        let ny = ((ext.y + EDGE_EPS_M) / self.step_m).floor() as usize + 1;
        Ok((nx, ny))
    }

    /// Lattice cell `(column, row)` nearest to `p`, if inside the lattice.
    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let (nx, ny) = self.lattice_dims().ok()?;
        let xy = project(p, self.min);
        let ix = (xy.x / self.step_m).round();
        let iy = (xy.y / self.step_m).round();
        if ix < 0.0 || iy < 0.0 || ix as usize >= nx || iy as usize >= ny {
            return None;
        }
        Some((ix as usize, iy as usize))
    }
}

/// Lattice centers anchored at `spec.min`, rows south to north, west to east
/// within a row. The upper edge is inclusive.
pub fn generate_centers(spec: &GridSpec) -> Result<Vec<GeoPoint>, GeoError> {
    let (nx, ny) = spec.lattice_dims()?;
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let xy = LocalXY {
                x: ix as f64 * spec.step_m,
                y: iy as f64 * spec.step_m,
            };
            out.push(unproject(xy, spec.min));
        }
    }
    Ok(out)
}

/// Distance test shared by the brute-force scan and [`BufferIndex`]:
/// `p` is projected in the local frame of `center`, boundary inclusive.
#[inline]
pub fn within_buffer(center: GeoPoint, p: GeoPoint, radius_m: f64) -> bool {
    let xy = project(p, center);
    // tolerance absorbs projection round-off for points placed exactly on the rim
    let r = radius_m + EDGE_EPS_M;
    xy.x * xy.x + xy.y * xy.y <= r * r
}

/// Brute-force buffer membership. Returns ascending indices.
pub fn points_in_buffer(center: GeoPoint, points: &[GeoPoint], radius_m: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| within_buffer(center, **p, radius_m))
        .map(|(i, _)| i)
        .collect()
}

/// Bucket index over a fixed point set for repeated buffer queries.
///
/// Buckets are square in degrees of latitude; candidate cells are widened
/// by a margin so the exact test in [`within_buffer`] sees every member.
#[derive(Debug, Clone)]
pub struct BufferIndex {
    points: Vec<GeoPoint>,
    cell_deg: f64,
    buckets: HashMap<(i64, i64), Vec<u32>>,
}

impl BufferIndex {
    pub fn new(points: &[GeoPoint], radius_m: f64) -> Self {
        let cell_deg = (radius_m / (EARTH_RADIUS_M * DEG)).max(1e-6);
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets
                .entry(Self::key(*p, cell_deg))
                .or_default()
                .push(i as u32);
        }
        BufferIndex {
            points: points.to_vec(),
            cell_deg,
            buckets,
        }
    }

    fn key(p: GeoPoint, cell_deg: f64) -> (i64, i64) {
        ((p.lon / cell_deg).floor() as i64, (p.lat / cell_deg).floor() as i64)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    /// Indices of members within `radius_m` of `center`, ascending.
    pub fn query(&self, center: GeoPoint, radius_m: f64) -> Vec<usize> {
        let k = EARTH_RADIUS_M * DEG;
        let margin = 1.01;
        let dlat = radius_m * margin / k + 1e-9;
        // Longitude span grows with latitude; use the widest latitude the disk touches.
        let lat_edge = (center.lat.abs() + dlat).min(89.9);
        let dlon = radius_m * margin / (k * (lat_edge * DEG).cos()) + 1e-9;
        let (x0, y0) = Self::key(
            GeoPoint {
                lon: center.lon - dlon,
                lat: center.lat - dlat,
            },
            self.cell_deg,
        );
        let (x1, y1) = Self::key(
            GeoPoint {
                lon: center.lon + dlon,
                lat: center.lat + dlat,
            },
            self.cell_deg,
        );
        let mut out = Vec::new();
        for bx in x0..=x1 {
            for by in y0..=y1 {
                if let Some(ids) = self.buckets.get(&(bx, by)) {
                    out.extend(
                        ids.iter()
                            .map(|&i| i as usize)
                            .filter(|&i| within_buffer(center, self.points[i], radius_m)),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}
