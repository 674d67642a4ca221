//! Toolkit configuration file.
//!
//! ```toml
//! seed = 1
//!
//! [data]
//! n = 20000
//!
//! [model]
//! vocab_size = 48
//! # ...
//!
//! [teacher.optimizer]
//! # ...
//!
//! [prune]
//! calibration_size = 10
//!
//! [recovery]
//! # ...
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{task_model_config, TaskMix};
use crate::importance::DEFAULT_CALIBRATION_SIZE;
use crate::model::ModelConfig;
use crate::pipeline::TeacherConfig;
use crate::prune::Floors;
use crate::recovery::{OptimizerConfig, OptimizerKind, RecoveryConfig, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    #[serde(default)]
    pub mix: TaskMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub calibration_size: usize,
    #[serde(default)]
    pub floors: Floors,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            calibration_size: DEFAULT_CALIBRATION_SIZE,
            floors: Floors::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolkitConfig {
    /// Root seed. Commands may override it; each consumer derives its own
    /// stream from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub recovery: RecoveryConfig,
}

impl Default for ToolkitConfig {
    /// The synthetic-suite setup shipped as `configs/desk.toml`.
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig {
                n: 20_000,
                mix: TaskMix::default(),
            },
            model: task_model_config(),
            teacher: TeacherConfig {
                optimizer: OptimizerConfig {
                    kind: OptimizerKind::Adam {
                        beta1: 0.9,
                        beta2: 0.999,
                        eps: 1e-8,
                    },
                    lr: 3e-3,
                    steps: 2000,
                    batch_size: 16,
                    grad_clip: Some(1.0),
                    schedule: Schedule::Cosine { warmup: 200 },
                    seed: 1,
                },
            },
            prune: PruneConfig::default(),
            recovery: RecoveryConfig::default(),
        }
    }
}

impl ToolkitConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.teacher.optimizer.validate().map_err(wrap)?;
        self.recovery.validate().map_err(wrap)?;
        if self.prune.calibration_size == 0 {
            return Err(Error::Config("prune.calibration_size must be at least 1".into()));
        }
        if self.data.n < 10 {
            return Err(Error::Config("data.n must be at least 10".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ToolkitConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ToolkitConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ToolkitConfig::default().to_toml_string().unwrap();
        text.push_str("\n[bogus]\nx = 1\n");
        assert!(matches!(ToolkitConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = ToolkitConfig::default();
        cfg.recovery.data_fraction = 0.0;
        let text = cfg.to_toml_string().unwrap();
        assert!(matches!(ToolkitConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn shipped_desk_config_is_the_default() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        assert_eq!(ToolkitConfig::load(&path).unwrap(), ToolkitConfig::default());
    }
}
