//! Named strategy lookup: regressors, GA objectives and color ramps are
//! registered under a string key and resolved at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{train_forest, train_svr, ForestConfig, SvrConfig};
use crate::features::Dataset;
use crate::nets::{init_model, train, Activation, MlpSpec, TrainConfig, TrainHistory};
use crate::predictor::{ModelError, Predictor, Target};

/// Name-keyed strategy table. Iteration order is the sorted key order.
pub struct Registry<T: ?Sized> {
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Default for Registry<T> {
    fn default() -> Self {
        Registry {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: ?Sized> Registry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces any entry already registered under `name`.
    pub fn register(&mut self, name: &str, item: Arc<T>) {
        self.entries.insert(name.to_string(), item);
    }

    pub fn get(&self, name: &str) -> Option<Arc<T>> {
        self.entries.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-algorithm settings; each algorithm reads its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitConfig {
    #[serde(default)]
    pub mlp: MlpOptions,
    #[serde(default)]
    pub rf: ForestConfig,
    #[serde(default)]
    pub svr: SvrConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpOptions {
    /// Hidden widths; `None` picks network T or D by target.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for MlpOptions {
    fn default() -> Self {
        MlpOptions {
            hidden: None,
            activation: Activation::Sigmoid,
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl MlpOptions {
    pub fn spec(&self, target: Target) -> MlpSpec {
        let hidden = self.hidden.clone().unwrap_or_else(|| match target {
            Target::Total => MlpSpec::network_t().hidden_widths,
            Target::Hourly => MlpSpec::network_d().hidden_widths,
        });
        MlpSpec::new(target, hidden).with_activation(self.activation)
    }
}

pub struct Fitted {
    pub model: Box<dyn Predictor>,
    /// Per-epoch record for iterative learners.
    pub history: Option<TrainHistory>,
}

pub trait Algorithm: Send + Sync {
    fn name(&self) -> &'static str;

    fn fit(
        &self,
        train_set: &Dataset,
        target: Target,
        cfg: &FitConfig,
        heldout: Option<&Dataset>,
    ) -> Result<Fitted, ModelError>;
}

pub struct MlpAlgorithm;
pub struct ForestAlgorithm;
pub struct SvrAlgorithm;

impl Algorithm for MlpAlgorithm {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn fit(
        &self,
        train_set: &Dataset,
        target: Target,
        cfg: &FitConfig,
        heldout: Option<&Dataset>,
    ) -> Result<Fitted, ModelError> {
        let spec = cfg.mlp.spec(target);
        let init = init_model(&spec, train_set.info, cfg.mlp.init_seed)?;
        let (model, history) = train(&init, train_set, &cfg.mlp.train, heldout)?;
        Ok(Fitted {
            model: Box::new(model),
            history: Some(history),
        })
    }
}

impl Algorithm for ForestAlgorithm {
    fn name(&self) -> &'static str {
        "rf"
    }

    fn fit(&self, train_set: &Dataset, target: Target, cfg: &FitConfig, _: Option<&Dataset>) -> Result<Fitted, ModelError> {
        Ok(Fitted {
            model: Box::new(train_forest(train_set, target, &cfg.rf)?),
            history: None,
        })
    }
}

impl Algorithm for SvrAlgorithm {
    fn name(&self) -> &'static str {
        "svr"
    }

    fn fit(&self, train_set: &Dataset, target: Target, cfg: &FitConfig, _: Option<&Dataset>) -> Result<Fitted, ModelError> {
        Ok(Fitted {
            model: Box::new(train_svr(train_set, target, &cfg.svr)?),
            history: None,
        })
    }
}

/// `mlp`, `rf` and `svr`.
pub fn algorithms() -> Registry<dyn Algorithm> {
    let mut r: Registry<dyn Algorithm> = Registry::new();
    for a in [
        Arc::new(MlpAlgorithm) as Arc<dyn Algorithm>,
        Arc::new(ForestAlgorithm),
        Arc::new(SvrAlgorithm),
    ] {
        r.register(a.name(), a);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_algorithms_are_registered() {
        let r = algorithms();
        assert_eq!(r.names(), vec!["mlp", "rf", "svr"]);
        assert_eq!(r.get("rf").unwrap().name(), "rf");
        assert!(r.get("gbm").is_none());
    }

    #[test]
    fn register_replaces() {
        let mut r = algorithms();
        r.register("mlp", Arc::new(SvrAlgorithm));
        assert_eq!(r.get("mlp").unwrap().name(), "svr");
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn default_mlp_spec_follows_target() {
        let o = MlpOptions::default();
        assert_eq!(o.spec(Target::Total).label(), "6x36");
        assert_eq!(o.spec(Target::Hourly).label(), "7x82");
    }
}
