//! Run configuration shared by every CLI verb.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::trainer::{parse_toml, ObjectiveConfig, TrainConfig, TrainSettings};

/// Everything a run can be configured with. Each section is optional in the
/// file and falls back to its defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainSettings,
    pub sampler: SamplerConfig,
    pub metrics: MetricConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.training().validate()?;
        self.sampler.validate()?;
        self.metrics.validate()
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            objective: self.objective.clone(),
            train: self.train.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn sections_are_optional_and_round_trip() {
        let cfg = RunConfig::from_toml("[sampler]\nsteps = 20\ngamma = 0.5\n").unwrap();
        assert_eq!(cfg.sampler.steps, 20);
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let err = RunConfig::from_toml("[metrics]\nwidth = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::from_toml("[sampler]\nsteps = 0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").is_err());
    }
}
