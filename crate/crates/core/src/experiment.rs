//! Full experiment configuration: the problem plus network, training,
//! certification and grid settings. Shipped presets live in `presets/`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::Route;
use crate::config::ProblemSpec;
use crate::error::{Error, Result};
use crate::net::TrainSchedule;

const PRESETS: &[(&str, &str)] = &[
    (
        "double-integrator-paper",
        include_str!("../presets/double-integrator-paper.json"),
    ),
    (
        "single-integrator",
        include_str!("../presets/single-integrator.json"),
    ),
];

/// Names of the built-in presets.
pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    #[serde(with = "crate::real")]
    pub w0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifySettings {
    pub route: Route,
    #[serde(with = "crate::real")]
    pub rho: f64,
    #[serde(with = "crate::real")]
    pub delta: f64,
    pub cells_per_axis: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub shape: Vec<usize>,
    #[serde(with = "crate::real")]
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CegisSettings {
    pub max_rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub problem: ProblemSpec,
    #[serde(default)]
    pub seed: u64,
    pub network: NetConfig,
    pub training: TrainSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_full: Option<TrainSchedule>,
    pub certify: CertifySettings,
    pub grid: GridSettings,
    pub cegis: CegisSettings,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset `{name}`")))?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.problem.validate()?;
        cfg.problem.gamma = Some(cfg.problem.gamma());
        cfg.training.validate()?;
        if let Some(full) = &cfg.training_full {
            full.validate()?;
        }
        if cfg.network.hidden.is_empty() || cfg.network.hidden.contains(&0) {
            return Err(Error::InvalidSpec("network needs nonempty hidden layers".into()));
        }
        if !(cfg.network.w0 > 0.0 && cfg.network.w0.is_finite()) {
            return Err(Error::InvalidSpec("frequency w0 must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Layer sizes `state_dim -> hidden... -> 1`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.problem.state_dim()];
        s.extend(&self.network.hidden);
        s.push(1);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in preset_names() {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn double_integrator_preset_constants() {
        let cfg = ExperimentConfig::preset("double-integrator-paper").unwrap();
        assert_eq!(cfg.layer_sizes(), vec![2, 40, 40, 1]);
        assert_eq!(cfg.network.w0, 30.0);
        assert_eq!(cfg.training.target_update, 5e-3);
        assert_eq!(cfg.training.w_sob, 0.0);
        assert_eq!(cfg.certify.rho, 0.1);
        assert_eq!(cfg.certify.delta, 1e-8);
        let full = cfg.training_full.unwrap();
        assert_eq!(full.iterations, 100_000);
        assert_eq!(full.batch_size, 163_840);
        assert_eq!(full.buffer_capacity, 4_000_000);
    }
}
