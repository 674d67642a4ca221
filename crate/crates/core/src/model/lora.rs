use prunekit_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{names, Model};
use crate::error::{Error, Result};
use crate::rng;

/// Low-rank adapter for one weight matrix `W: [d_out, d_in]`, contributing
/// `scaling · B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `[rank, d_in]`
    pub a: Tensor,
    /// `[d_out, rank]`, zero at attachment.
    pub b: Tensor,
    pub scaling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Effective scaling is `alpha / rank`.
    pub alpha: f64,
    /// Per-layer parameter suffixes to adapt.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec![names::Q.to_string(), names::V.to_string()],
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

pub(crate) fn factor_name(target: &str, which: char) -> String {
    format!("{target}.lora_{which}")
}

pub(crate) fn split_name(name: &str) -> Option<(&str, char)> {
    if let Some(t) = name.strip_suffix(".lora_a") {
        Some((t, 'a'))
    } else {
        name.strip_suffix(".lora_b").map(|t| (t, 'b'))
    }
}

impl Model {
    /// Attaches one adapter per targeted matrix in every layer. `A` is
    /// normal(0, 1/sqrt(d_in)), `B` is zero, so the model function is
    /// unchanged.
    pub fn attach_lora(&mut self, config: &LoraConfig, seed: u64) -> Result<()> {
        if config.rank == 0 || !(config.alpha > 0.0) {
            return Err(Error::param("LoRA rank and alpha must be positive"));
        }
        if !self.lora.is_empty() {
            return Err(Error::Contract("LoRA adapters already attached".into()));
        }
        let mut rng = rng::stream(seed, "lora");
        for i in 0..self.n_layers() {
            for suffix in &config.targets {
                let target = names::layer(i, suffix);
                let (d_out, d_in) = self
                    .params
                    .get(&target)
                    .ok_or_else(|| Error::param(format!("LoRA target {target} does not exist")))?
                    .dims2()?;
                let a = Model::normal_tensor(
                    &[config.rank, d_in],
                    1.0 / (d_in as f64).sqrt(),
                    &mut rng,
                );
                let b = Tensor::zeros(&[d_out, config.rank]);
                self.lora.insert(
                    target,
                    LoraAdapter {
                        a,
                        b,
                        scaling: config.scaling(),
                    },
                );
            }
        }
        Ok(())
    }

    pub(crate) fn insert_adapter(&mut self, target: String, adapter: LoraAdapter) -> Result<()> {
        let (d_out, d_in) = self
            .params
            .get(&target)
            .ok_or_else(|| Error::Contract(format!("adapter target {target} does not exist")))?
            .dims2()?;
        let (r, a_in) = adapter.a.dims2()?;
        let (b_out, rb) = adapter.b.dims2()?;
        if a_in != d_in || b_out != d_out || r != rb {
            return Err(Error::Contract(format!("adapter for {target} has inconsistent shapes")));
        }
        self.lora.insert(target, adapter);
        Ok(())
    }

    /// Folds every adapter into its base matrix (`W += scaling · B · A`) and
    /// detaches it.
    pub fn merge_lora(&mut self) -> Result<()> {
        let adapters = std::mem::take(&mut self.lora);
        for (target, ad) in adapters {
            let w = self.params.get_mut(&target).expect("adapter target exists");
            let (d_out, d_in) = w.dims2()?;
            let (r, _) = ad.a.dims2()?;
            let mut delta = vec![0.0; d_out * d_in];
            for o in 0..d_out {
                for k in 0..r {
                    let bv = ad.b.data()[o * r + k];
                    if bv == 0.0 {
                        continue;
                    }
                    let arow = ad.a.row(k);
                    for (dst, &av) in delta[o * d_in..(o + 1) * d_in].iter_mut().zip(arow) {
                        *dst += bv * av;
                    }
                }
            }
            let delta = Tensor::new(vec![d_out, d_in], delta)?;
            w.add_scaled(&delta, ad.scaling)?;
        }
        Ok(())
    }
}
