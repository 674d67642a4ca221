use std::collections::BTreeMap;

use prunekit_tensor::{precision, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to zero.
    Cosine { warmup: usize },
}

impl Schedule {
    /// Multiplier for 0-based `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { warmup } => {
                if step < warmup {
                    return (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let p = ((step - warmup) as f64 / span).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum: 0.0 },
            lr: 0.05,
            steps: 600,
            batch_size: 8,
            grad_clip: Some(1.0),
            schedule: Schedule::Constant,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::param("optimizer needs lr > 0, steps >= 1 and batch_size >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::param("grad_clip must be positive"));
            }
        }
        if let Schedule::Cosine { warmup } = self.schedule {
            if warmup >= self.steps {
                return Err(Error::param("cosine warmup must be shorter than the run"));
            }
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::param("momentum must be in [0,1)"))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::param("invalid Adam coefficients"))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            t: 0,
        }
    }

    /// Applies one update. Gradients are clipped jointly first.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let mut scale = 1.0;
        if let Some(clip) = self.config.grad_clip {
            let norm = grads
                .values()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let lr = self.config.lr
            * self
                .config
                .schedule
                .factor(self.t as usize - 1, self.config.steps);
        for (name, g) in grads {
            let p = model
                .tensor_mut(name)
                .ok_or_else(|| Error::Contract(format!("optimizer got unknown parameter {name}")))?;
            let n = p.numel();
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => {
                    let vel = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    for ((w, &gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *v = momentum * *v + scale * gv;
                        *w = precision::round(*w - lr * *v);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let s = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    for (((w, &gv), mv), sv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        let gv = scale * gv;
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *sv = beta2 * *sv + (1.0 - beta2) * gv * gv;
                        let update = (*mv / c1) / ((*sv / c2).sqrt() + eps);
                        *w = precision::round(*w - lr * update);
                    }
                }
            }
        }
        Ok(())
    }
}
