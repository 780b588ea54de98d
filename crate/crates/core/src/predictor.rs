//! Common surface for every trained regressor plus the JSON model envelope.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{ForestModel, SvrModel};
use crate::features::{NormalizationInfo, Sample, ENV_WIDTH};
use crate::ingest::HOURS;
use crate::nets::MlpModel;
use crate::Provenance;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("models were trained under different normalization constants")]
    NormMismatch,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("expected a {expected} model, got {got}")]
    WrongTarget { expected: Target, got: Target },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model file {path}: {msg}")]
    File { path: String, msg: String },
}

/// What a model predicts. Serialized as the network tags `T` and `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    /// Normalized daily VHT, one output (network T).
    #[serde(rename = "T")]
    Total,
    /// 24 hourly VHT shares (network D).
    #[serde(rename = "D")]
    Hourly,
}

impl Target {
    pub fn width(self) -> usize {
        match self {
            Target::Total => 1,
            Target::Hourly => HOURS,
        }
    }

    /// Training targets for a sample.
    pub fn values(self, s: &Sample) -> Vec<f64> {
        match self {
            Target::Total => vec![s.demand.total_norm],
            Target::Hourly => s.demand.hourly.to_vec(),
        }
    }

    /// Samples whose targets are defined.
    pub fn usable(self, s: &Sample) -> bool {
        match self {
            Target::Total => true,
            Target::Hourly => s.has_demand(),
        }
    }

    pub fn parse(s: &str) -> Option<Target> {
        match s {
            "T" | "t" | "total" => Some(Target::Total),
            "D" | "d" | "hourly" => Some(Target::Hourly),
            _ => None,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Total => "T",
            Target::Hourly => "D",
        })
    }
}

/// Rescales to a probability vector. Negative entries are clipped first;
/// an all-zero vector becomes uniform.
pub fn renormalize(v: &mut [f64]) {
    for x in v.iter_mut() {
        if !(*x > 0.0) {
            *x = 0.0;
        }
    }
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        for x in v.iter_mut() {
            *x /= sum;
        }
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    }
}

/// A trained model that maps the 17 environment features to demand.
pub trait Predictor: Send + Sync + fmt::Debug {
    fn algorithm(&self) -> &'static str;
    fn target(&self) -> Target;
    fn norm_info(&self) -> &NormalizationInfo;

    /// Untransformed model output.
    fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>, ModelError>;

    /// Output as scored: hourly outputs are renormalized to sum to 1.
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = self.predict_raw(x)?;
        if self.target() == Target::Hourly {
            renormalize(&mut out);
        }
        Ok(out)
    }

    fn to_saved(&self) -> SavedModel;
}

pub(crate) fn check_input(x: &[f64]) -> Result<(), ModelError> {
    if x.len() != ENV_WIDTH {
        return Err(ModelError::Shape {
            expected: ENV_WIDTH,
            got: x.len(),
        });
    }
    Ok(())
}

/// On-disk model envelope, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SavedModel {
    #[serde(rename = "T")]
    T(MlpModel),
    #[serde(rename = "D")]
    D(MlpModel),
    #[serde(rename = "rf")]
    Forest(ForestModel),
    #[serde(rename = "svr")]
    Svr(SvrModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Envelope {
    #[serde(flatten)]
    model: SavedModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl SavedModel {
    pub fn format_version(&self) -> u32 {
        match self {
            SavedModel::T(m) | SavedModel::D(m) => m.format_version,
            SavedModel::Forest(m) => m.format_version,
            SavedModel::Svr(m) => m.format_version,
        }
    }

    pub fn into_predictor(self) -> Result<Box<dyn Predictor>, ModelError> {
        let p: Box<dyn Predictor> = match self {
            SavedModel::T(m) | SavedModel::D(m) => {
                m.validate()?;
                Box::new(m)
            }
            SavedModel::Forest(m) => Box::new(m),
            SavedModel::Svr(m) => Box::new(m),
        };
        Ok(p)
    }

    pub fn to_json(&self, provenance: Option<Provenance>) -> Result<String, ModelError> {
        let env = Envelope {
            model: self.clone(),
            provenance,
        };
        serde_json::to_string(&env).map_err(|e| ModelError::Invalid(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<(SavedModel, Option<Provenance>), ModelError> {
        let env: Envelope = serde_json::from_str(s).map_err(|e| ModelError::Invalid(e.to_string()))?;
        if env.model.format_version() != FORMAT_VERSION {
            return Err(ModelError::Invalid(format!(
                "unsupported format_version {}",
                env.model.format_version()
            )));
        }
        Ok((env.model, env.provenance))
    }
}

pub fn save_model(path: &Path, model: &dyn Predictor, provenance: Option<Provenance>) -> Result<(), ModelError> {
    let json = model.to_saved().to_json(provenance)?;
    std::fs::write(path, json + "\n").map_err(|e| ModelError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn load_saved(path: &Path) -> Result<SavedModel, ModelError> {
    let s = std::fs::read_to_string(path).map_err(|e| ModelError::File {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    SavedModel::from_json(&s)
        .map(|(m, _)| m)
        .map_err(|e| ModelError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
}

pub fn load_model(path: &Path) -> Result<Box<dyn Predictor>, ModelError> {
    load_saved(path)?.into_predictor()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renormalize_constant_vector() {
        let mut v = vec![0.3; 24];
        renormalize(&mut v);
        for x in &v {
            assert!((x - 1.0 / 24.0).abs() < 1e-15);
        }
    }

    #[test]
    fn renormalize_clips_and_handles_zero() {
        let mut v = vec![-1.0, 0.0, 3.0, 1.0];
        renormalize(&mut v);
        assert_eq!(v, vec![0.0, 0.0, 0.75, 0.25]);
        let mut z = vec![0.0; 4];
        renormalize(&mut z);
        assert_eq!(z, vec![0.25; 4]);
    }

    #[test]
    fn target_tags() {
        assert_eq!(serde_json::to_string(&Target::Total).unwrap(), "\"T\"");
        assert_eq!(Target::parse("D"), Some(Target::Hourly));
        assert_eq!(Target::Hourly.width(), 24);
    }
}
