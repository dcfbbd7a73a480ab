//! Run configuration: one TOML document with `model`, `train` and `data` sections.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");
/// Micro model on a few small tiles, for smoke runs.
pub const MICRO_CONFIG: &str = include_str!("../../../configs/micro.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 7, model: ModelConfig::default(), train: TrainConfig::default(), data: DataConfig::default() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if !self.data.patch.is_multiple_of(crate::encoder::MAX_STRIDE) {
            return Err(Error::Config(format!(
                "patch {} must be divisible by {}",
                self.data.patch,
                crate::encoder::MAX_STRIDE
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}
