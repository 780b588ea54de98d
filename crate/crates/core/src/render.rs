//! Grid heatmaps and error maps as PNG, hourly curves as SVG.
//!
//! Output bytes depend only on the inputs: no timestamps, and every number
//! written to SVG goes through fixed-precision formatting.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalx::SurfaceCell;
use crate::geo_grid::{GeoPoint, GridSpec};
use crate::ingest::HOURS;
use crate::registry::Registry;

pub type Rgb = [u8; 3];

/// Fill for cells without a value.
pub const MISSING: Rgb = [58, 64, 92];

/// PNG text key holding the run's config hash.
pub const HASH_KEY: &str = "config_hash";

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("raster has {got} values, expected {width}x{height}")]
    RasterShape { width: usize, height: usize, got: usize },
    #[error("series `{label}` has {len} values, expected 24")]
    Shape { label: String, len: usize },
    #[error("grid: {0}")]
    Grid(#[from] crate::geo_grid::GeoError),
    #[error("bad color ramp: {0}")]
    Ramp(String),
    #[error("cell size must be at least one pixel")]
    CellSize,
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Row-major values; row 0 is the southern edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRaster {
    pub width: usize,
    pub height: usize,
    pub cell_size_m: f64,
    pub origin: GeoPoint,
    pub values: Vec<Option<f64>>,
}

impl GridRaster {
    pub fn new(
        width: usize,
        height: usize,
        cell_size_m: f64,
        origin: GeoPoint,
        values: Vec<Option<f64>>,
    ) -> Result<Self, RenderError> {
        if values.len() != width * height {
            return Err(RenderError::RasterShape {
                width,
                height,
                got: values.len(),
            });
        }
        Ok(GridRaster {
            width,
            height,
            cell_size_m,
            origin,
            values,
        })
    }

    /// Places each point's value in the lattice cell it falls on. Points off
    /// the lattice are dropped; later points overwrite earlier ones.
    pub fn from_points(spec: &GridSpec, points: impl IntoIterator<Item = (GeoPoint, f64)>) -> Result<Self, RenderError> {
        let (w, h) = spec.lattice_dims()?;
        let mut values = vec![None; w * h];
        for (p, v) in points {
            if let Some((ix, iy)) = spec.cell_of(p) {
                values[iy * w + ix] = Some(v);
            }
        }
        Self::new(w, h, spec.step_m, spec.min, values)
    }

    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        self.values[row * self.width + col]
    }

    /// Values divided by the raster maximum, negatives clamped to 0.
    /// An all-zero raster stays at 0.
    pub fn normalized(&self) -> GridRaster {
        let max = self.values.iter().flatten().copied().fold(0.0, f64::max);
        let values = self
            .values
            .iter()
            .map(|v| v.map(|x| if max > 0.0 { (x / max).clamp(0.0, 1.0) } else { 0.0 }))
            .collect();
        GridRaster {
            values,
            ..self.clone()
        }
    }
}

/// Piecewise-linear ramp over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorRamp {
    pub stops: Vec<(f64, Rgb)>,
}

impl ColorRamp {
    pub fn new(stops: Vec<(f64, Rgb)>) -> Result<Self, RenderError> {
        if stops.len() < 2 {
            return Err(RenderError::Ramp("need at least two stops".into()));
        }
        if stops[0].0 != 0.0 || stops[stops.len() - 1].0 != 1.0 {
            return Err(RenderError::Ramp("stops must span 0 to 1".into()));
        }
        if stops.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(RenderError::Ramp("stop positions must increase".into()));
        }
        Ok(ColorRamp { stops })
    }

    pub fn color_at(&self, t: f64) -> Rgb {
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        let i = self.stops.partition_point(|s| s.0 <= t).clamp(1, self.stops.len() - 1);
        let (t0, c0) = self.stops[i - 1];
        let (t1, c1) = self.stops[i];
        let f = (t - t0) / (t1 - t0);
        let mut out = [0u8; 3];
        for k in 0..3 {
            out[k] = (c0[k] as f64 + f * (c1[k] as f64 - c0[k] as f64)).round() as u8;
        }
        out
    }

    /// Dark red through orange to pale yellow.
    pub fn heat() -> Self {
        ColorRamp {
            stops: vec![
                (0.0, [12, 8, 20]),
                (0.3, [120, 20, 40]),
                (0.6, [230, 90, 20]),
                (0.85, [250, 200, 60]),
                (1.0, [255, 250, 210]),
            ],
        }
    }

    /// Dark blue through teal to yellow.
    pub fn cool() -> Self {
        ColorRamp {
            stops: vec![
                (0.0, [20, 16, 70]),
                (0.35, [40, 90, 140]),
                (0.65, [40, 170, 130]),
                (1.0, [250, 230, 40]),
            ],
        }
    }

    pub fn gray() -> Self {
        ColorRamp {
            stops: vec![(0.0, [0, 0, 0]), (1.0, [255, 255, 255])],
        }
    }
}

/// `heat` (default), `cool` and `gray`.
pub fn ramps() -> Registry<ColorRamp> {
    let mut r = Registry::new();
    r.register("heat", Arc::new(ColorRamp::heat()));
    r.register("cool", Arc::new(ColorRamp::cool()));
    r.register("gray", Arc::new(ColorRamp::gray()));
    r
}

/// RGB image, north up, `cell_px` square pixels per cell.
pub fn rasterize(raster: &GridRaster, cell_px: usize, color: impl Fn(Option<f64>) -> Rgb) -> Result<(u32, u32, Vec<u8>), RenderError> {
    if cell_px == 0 {
        return Err(RenderError::CellSize);
    }
    let w = raster.width * cell_px;
    let h = raster.height * cell_px;
    let mut buf = vec![0u8; w * h * 3];
    for row in 0..raster.height {
        let y0 = (raster.height - 1 - row) * cell_px;
        for col in 0..raster.width {
            let c = color(raster.get(col, row));
            for y in y0..y0 + cell_px {
                for x in col * cell_px..(col + 1) * cell_px {
                    buf[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
                }
            }
        }
    }
    Ok((w as u32, h as u32, buf))
}

pub fn encode_png(width: u32, height: u32, rgb: &[u8], config_hash: Option<&str>) -> Result<Vec<u8>, RenderError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(h) = config_hash {
            enc.add_text_chunk(HASH_KEY.to_string(), h.to_string())?;
        }
        let mut w = enc.write_header()?;
        w.write_image_data(rgb)?;
        w.finish()?;
    }
    Ok(out)
}

/// Max-normalizes the raster and colors it with `ramp`.
pub fn heatmap_png(raster: &GridRaster, ramp: &ColorRamp, cell_px: usize, config_hash: Option<&str>) -> Result<Vec<u8>, RenderError> {
    let n = raster.normalized();
    let (w, h, rgb) = rasterize(&n, cell_px, |v| v.map_or(MISSING, |x| ramp.color_at(x)))?;
    encode_png(w, h, &rgb, config_hash)
}

/// Gray level for an accuracy: 1 is black, 0 or below is white.
pub fn error_gray(accuracy: f64) -> u8 {
    ((1.0 - accuracy).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Error raster on `spec`'s lattice. Cells without a sample, or whose
/// accuracy is undefined, are missing.
pub fn error_raster(surface: &[SurfaceCell], spec: &GridSpec) -> Result<GridRaster, RenderError> {
    GridRaster::from_points(spec, surface.iter().filter_map(|c| c.accuracy.map(|a| (c.center, a))))
}

pub fn error_map_png(surface: &[SurfaceCell], spec: &GridSpec, cell_px: usize, config_hash: Option<&str>) -> Result<Vec<u8>, RenderError> {
    let r = error_raster(surface, spec)?;
    let (w, h, rgb) = rasterize(&r, cell_px, |v| {
        v.map_or(MISSING, |a| {
            let g = error_gray(a);
            [g, g, g]
        })
    })?;
    encode_png(w, h, &rgb, config_hash)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
    /// Drawn thin and translucent, as for ground truth.
    #[serde(default)]
    pub faded: bool,
}

const PALETTE: [&str; 8] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Plot coordinates of `v` at `hour` for a y axis topping out at `ymax`.
pub fn curve_point(hour: usize, v: f64, ymax: f64) -> (f64, f64) {
    let pw = SVG_W - LEFT - RIGHT;
    let ph = SVG_H - TOP - BOTTOM;
    (LEFT + pw * hour as f64 / (HOURS - 1) as f64, TOP + ph * (1.0 - v / ymax))
}

/// Shared y-axis top: 10% above the largest value.
pub fn curve_ymax(series: &[Series]) -> f64 {
    let m = series.iter().flat_map(|s| s.values.iter().copied()).fold(0.0, f64::max);
    if m > 0.0 {
        m * 1.1
    } else {
        1.0
    }
}

/// Line chart over hours 0..23 with a legend on the right.
pub fn curves_svg(series: &[Series], title: &str) -> Result<String, RenderError> {
    for s in series {
        if s.values.len() != HOURS {
            return Err(RenderError::Shape {
                label: s.label.clone(),
                len: s.values.len(),
            });
        }
    }
    let ymax = curve_ymax(series);
    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_W:.0}" height="{SVG_H:.0}" viewBox="0 0 {SVG_W:.0} {SVG_H:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(o, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(o, r#"<text x="{LEFT:.2}" y="16.00" font-size="13">{}</text>"#, escape(title));
    let (x0, y0) = curve_point(0, 0.0, ymax);
    let (x1, _) = curve_point(HOURS - 1, 0.0, ymax);
    let _ = writeln!(
        o,
        r##"<path d="M{x0:.2},{TOP:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="#444"/>"##
    );
    for h in (0..HOURS).step_by(3) {
        let (x, _) = curve_point(h, 0.0, ymax);
        let _ = writeln!(o, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{h}</text>"#, y0 + 16.0);
    }
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let (_, y) = curve_point(0, v, ymax);
        let _ = writeln!(o, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.4}</text>"#, x0 - 6.0, y + 4.0);
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let (width, opacity) = if s.faded { (1.0, 0.35) } else { (2.0, 1.0) };
        let mut d = String::new();
        for (h, &v) in s.values.iter().enumerate() {
            let (x, y) = curve_point(h, v, ymax);
            let _ = write!(d, "{}{x:.2},{y:.2}", if h == 0 { "M" } else { " L" });
        }
        let _ = writeln!(
            o,
            r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="{width:.1}" stroke-opacity="{opacity:.2}"/>"#
        );
        let ly = TOP + 14.0 * i as f64 + 8.0;
        let lx = SVG_W - RIGHT + 12.0;
        let _ = writeln!(
            o,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="{width:.1}" stroke-opacity="{opacity:.2}"/>"#,
            lx + 18.0
        );
        let _ = writeln!(o, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&s.label));
    }
    o.push_str("</svg>\n");
    Ok(o)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RenderError> {
    let io_err = |source| RenderError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    fs::write(path, bytes).map_err(io_err)
}

pub fn render_heatmap(raster: &GridRaster, ramp: &ColorRamp, cell_px: usize, config_hash: Option<&str>, path: &Path) -> Result<(), RenderError> {
    write_bytes(path, &heatmap_png(raster, ramp, cell_px, config_hash)?)
}

pub fn render_error_map(
    surface: &[SurfaceCell],
    spec: &GridSpec,
    cell_px: usize,
    config_hash: Option<&str>,
    path: &Path,
) -> Result<(), RenderError> {
    write_bytes(path, &error_map_png(surface, spec, cell_px, config_hash)?)
}

pub fn render_curves(series: &[Series], title: &str, path: &Path) -> Result<(), RenderError> {
    write_bytes(path, curves_svg(series, title)?.as_bytes())
}
