use serde::{Deserialize, Serialize};

use super::losses::KdDirection;
use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::model::LoraConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScope {
    ProjectorOnly,
    /// Projector plus the language model: LoRA adapters when configured,
    /// otherwise every decoder, embedding and head parameter.
    ProjectorLlm,
}

pub const DEFAULT_TAU: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Divide `gamma` by `d_model` so the matching term is a per-dimension
    /// mean.
    #[serde(default = "yes")]
    pub normalize_gamma: bool,
    pub tau: f64,
    pub kd_direction: KdDirection,
    /// Layers to match, counted from the end (1 = last layer output).
    pub match_layers: Vec<usize>,
    pub scope: TrainScope,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    pub data_fraction: f64,
    pub optimizer: OptimizerConfig,
}

fn yes() -> bool {
    true
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            normalize_gamma: true,
            tau: DEFAULT_TAU,
            kd_direction: KdDirection::Rkl,
            match_layers: vec![1],
            scope: TrainScope::ProjectorLlm,
            lora: Some(LoraConfig::default()),
            data_fraction: 1.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{n} must be a finite non-negative number")));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::param("at least one of alpha, beta, gamma must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::param("tau must be positive"));
        }
        if self.beta > 0.0 && self.kd_direction == KdDirection::None {
            return Err(Error::param("beta > 0 needs a KD direction"));
        }
        if self.gamma > 0.0 && (self.match_layers.is_empty() || self.match_layers.contains(&0)) {
            return Err(Error::param("gamma > 0 needs match layers counted from 1"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::param(format!(
                "data_fraction must be in (0,1], got {}",
                self.data_fraction
            )));
        }
        if self.scope == TrainScope::ProjectorOnly && self.lora.is_some() {
            return Err(Error::param("LoRA needs the projector-llm scope"));
        }
        self.optimizer.validate()
    }

    pub fn gamma_effective(&self, d_model: usize) -> f64 {
        if self.normalize_gamma {
            self.gamma / d_model as f64
        } else {
            self.gamma
        }
    }

    pub fn uses_teacher(&self) -> bool {
        self.beta > 0.0 || self.gamma > 0.0
    }
}

/// Named recovery recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "none")]
    NoRecovery,
    #[serde(rename = "projector-ft")]
    ProjectorFt,
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "ft+l2")]
    FtL2,
    #[serde(rename = "ft+rkl")]
    FtRkl,
    #[serde(rename = "ft+kl")]
    FtKl,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::NoRecovery,
        Strategy::ProjectorFt,
        Strategy::Ft,
        Strategy::FtL2,
        Strategy::FtRkl,
        Strategy::FtKl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::NoRecovery => "none",
            Strategy::ProjectorFt => "projector-ft",
            Strategy::Ft => "ft",
            Strategy::FtL2 => "ft+l2",
            Strategy::FtRkl => "ft+rkl",
            Strategy::FtKl => "ft+kl",
        }
    }

    /// Loss coefficients and scope for this recipe on top of `base`
    /// (optimizer, LoRA shape, tau and data fraction are kept).
    pub fn apply(self, base: &RecoveryConfig) -> Option<RecoveryConfig> {
        let mut c = base.clone();
        c.alpha = 1.0;
        c.beta = 0.0;
        c.gamma = 0.0;
        c.scope = TrainScope::ProjectorLlm;
        if c.lora.is_none() {
            c.lora = Some(LoraConfig::default());
        }
        match self {
            Strategy::NoRecovery => return None,
            Strategy::ProjectorFt => {
                c.scope = TrainScope::ProjectorOnly;
                c.lora = None;
            }
            Strategy::Ft => {}
            Strategy::FtL2 => c.gamma = 1.0,
            Strategy::FtRkl => {
                c.beta = 1.0;
                c.kd_direction = KdDirection::Rkl;
            }
            Strategy::FtKl => {
                c.beta = 1.0;
                c.kd_direction = KdDirection::Kl;
            }
        }
        Some(c)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.label() == s)
            .ok_or_else(|| Error::param(format!("unknown recovery strategy {s}")))
    }
}
