//! Pipeline configuration, one JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense_crf::PairwiseConfig;
use crate::diverse_mbest::DiversityConfig;
use crate::weak_loss::LossConfig;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub crf: PairwiseConfig,
    pub diversity: DiversityConfig,
    pub loss: LossConfig,
    /// Clamp applied to the prior before taking logs.
    pub epsilon: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            crf: PairwiseConfig::default(),
            diversity: DiversityConfig::default(),
            loss: LossConfig::default(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.crf.validate().map_err(|e| invalid(&e))?;
        self.diversity.validate().map_err(|e| invalid(&e))?;
        self.loss.validate().map_err(|e| invalid(&e))?;
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(ConfigError::Invalid(format!(
                "epsilon {} outside (0, 0.5)",
                self.epsilon
            )));
        }
        Ok(())
    }
}
