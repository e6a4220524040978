use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::filter::{AblationSwitches, LayerSpec};
use crate::loss::LossConfig;
use crate::source::SourceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    PlainSgd,
    Momentum,
    /// Per-parameter adaptive step sizes (Adam).
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub epsilon: f64,
    /// Global L2 gradient norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    10.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adaptive,
            learning_rate: 3e-3,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
            clip_norm: default_clip(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            max_steps: None,
            seed: 1,
        }
    }
}

/// Shape of the acoustic feature files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub spectral_dims: usize,
    pub frame_shift: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            spectral_dims: 10,
            frame_shift: 80,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub layers: LayerSpec,
    #[serde(default)]
    pub switches: AblationSwitches,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub data: DataPaths,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.source.validate()?;
        self.layers.validate()?;
        let opt = &self.optimizer;
        if !(opt.learning_rate >= 0.0 && opt.learning_rate.is_finite()) {
            return Err(NsfError::Config(format!(
                "learning rate must be non-negative, got {}",
                opt.learning_rate
            )));
        }
        if !(opt.clip_norm >= 0.0) {
            return Err(NsfError::Config("clip_norm must be non-negative".into()));
        }
        if self.schedule.epochs == 0 {
            return Err(NsfError::Config("epochs must be at least 1".into()));
        }
        if self.features.frame_shift == 0 {
            return Err(NsfError::Config("feature frame shift must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| NsfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NsfError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NsfError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            NsfError::Config(msg) => NsfError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::BMode;

    #[test]
    fn toml_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.switches.b_mode = BMode::FixedOne;
        cfg.schedule.max_steps = Some(200);
        cfg.data.train = Some(PathBuf::from("data/train"));
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = TrainConfig::from_toml_str("[layers]\nstages = 2\nlayers_per_stage = 3\nfilter_width = 3\nchannels = 8\ndilation_cycle = 10\n").unwrap();
        assert_eq!(cfg.layers.channels, 8);
        assert_eq!(cfg.source, SourceConfig::default());
        assert_eq!(cfg.loss.configs.len(), 3);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml_str("[schedule]\nepochs = 0\nseed = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("[optimizer]\nkind = \"adaptive\"\nlearning_rate = -1.0\n").is_err());
        assert!(TrainConfig::from_toml_str("[switches]\nb_mode = \"sometimes\"\n").is_err());
        assert!(TrainConfig::from_toml_str("bogus = 1\n").is_err());
    }
}
