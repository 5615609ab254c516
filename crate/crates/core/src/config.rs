//! Experiment configuration: one TOML file covering every stage, with the
//! same defaults the library uses. Unknown keys are rejected so a typo in a
//! config cannot silently fall back to a default.

use crate::controllers::{GradientConfig, ReactiveConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::features::{DetectorConfig, MatcherConfig};
use crate::labeler::LabelMetric;
use crate::model::{NetworkConfig, TrainConfig};
use crate::sim::{CameraModel, TunnelSceneConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Collection and labeling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSettings {
    /// Episodes collected per round.
    pub episodes: usize,
    pub metric: LabelMetric,
    /// Blend weight when the metric is hybrid.
    pub weight: f64,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        Self { episodes: 10, metric: LabelMetric::Hybrid, weight: 0.5 }
    }
}

/// Evaluation and comparison settings beyond the feature pipeline itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Episodes per controller in a comparison.
    pub episodes: usize,
    pub dynamic_margin: usize,
    pub failure_nfm_floor: usize,
    pub failure_run: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { episodes: 6, dynamic_margin: 15, failure_nfm_floor: 20, failure_run: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: TunnelSceneConfig,
    pub camera: CameraModel,
    pub detector: DetectorConfig,
    pub matcher: MatcherConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub sampling: SamplingSettings,
    pub reactive: ReactiveConfig,
    pub gradient: GradientConfig,
    pub evaluation: EvalSettings,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.camera.validate()?;
        self.network.validate()?;
        self.training.validate()?;
        self.reactive.validate()?;
        self.gradient.validate()?;
        if self.sampling.episodes == 0 {
            return Err(Error::InvalidConfig("sampling.episodes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sampling.weight) {
            return Err(Error::InvalidConfig(format!(
                "sampling.weight {} outside [0, 1]",
                self.sampling.weight
            )));
        }
        if self.evaluation.episodes == 0 || self.evaluation.failure_run == 0 {
            return Err(Error::InvalidConfig(
                "evaluation.episodes and failure_run must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Assembles the evaluation config from its scattered sections.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            detector: self.detector.clone(),
            matcher: self.matcher.clone(),
            dynamic_margin: self.evaluation.dynamic_margin,
            failure_nfm_floor: self.evaluation.failure_nfm_floor,
            failure_run: self.evaluation.failure_run,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))
    }
}
