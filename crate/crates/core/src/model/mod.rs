//! The toy multimodal decoder: a frozen linear vision stub, a two-layer GELU
//! projector, and a stack of pre-norm transformer layers with rotary
//! attention and GELU MLPs.

mod config;
mod forward;
mod lora;
mod triplet;

use std::collections::BTreeMap;

use prunekit_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{LayerShape, ModelConfig};
pub use forward::{Binding, Capture, ForwardTrace, GraphTrace};
pub use lora::{LoraAdapter, LoraConfig};
pub use triplet::{TokenLayout, Triplet};

use crate::error::{Error, Result};
use crate::rng;


/// Parameter names shared by the model, pruning and recovery code.
pub mod names {
    pub const VISION: &str = "vision.weight";
    pub const FC1_W: &str = "projector.fc1.weight";
    pub const FC1_B: &str = "projector.fc1.bias";
    pub const FC2_W: &str = "projector.fc2.weight";
    pub const FC2_B: &str = "projector.fc2.bias";
    pub const EMBED: &str = "embed.weight";
    pub const FINAL_NORM: &str = "final_norm.weight";
    pub const HEAD: &str = "head.weight";

    pub const ATTN_NORM: &str = "attn_norm.weight";
    pub const Q: &str = "attn.q_proj.weight";
    pub const K: &str = "attn.k_proj.weight";
    pub const V: &str = "attn.v_proj.weight";
    pub const O: &str = "attn.o_proj.weight";
    pub const MLP_NORM: &str = "mlp_norm.weight";
    pub const UP_W: &str = "mlp.up_proj.weight";
    pub const UP_B: &str = "mlp.up_proj.bias";
    pub const DOWN_W: &str = "mlp.down_proj.weight";
    pub const DOWN_B: &str = "mlp.down_proj.bias";

    pub const LAYER_PARAMS: [&str; 10] = [
        ATTN_NORM, Q, K, V, O, MLP_NORM, UP_W, UP_B, DOWN_W, DOWN_B,
    ];

    pub fn layer(i: usize, suffix: &str) -> String {
        format!("layers.{i}.{suffix}")
    }

    /// Splits `layers.{i}.{suffix}` into `(i, suffix)`.
    pub fn parse_layer(name: &str) -> Option<(usize, &str)> {
        let rest = name.strip_prefix("layers.")?;
        let (idx, suffix) = rest.split_once('.')?;
        Some((idx.parse().ok()?, suffix))
    }
}

/// Disjoint parameter scopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    Vision,
    Projector,
    Layer(usize),
    /// Token embedding, final norm and output head.
    Head,
}

impl Scope {
    pub fn of(name: &str) -> Scope {
        if name.starts_with("vision.") {
            Scope::Vision
        } else if name.starts_with("projector.") {
            Scope::Projector
        } else if let Some((i, _)) = names::parse_layer(name) {
            Scope::Layer(i)
        } else {
            Scope::Head
        }
    }

    pub fn is_frozen(self) -> bool {
        self == Scope::Vision
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerShape>,
    params: BTreeMap<String, Tensor>,
    lora: BTreeMap<String, LoraAdapter>,
}

/// Expected tensor shapes for a model with the given per-layer widths.
pub fn expected_shapes(config: &ModelConfig, layers: &[LayerShape]) -> BTreeMap<String, Vec<usize>> {
    let d = config.d_model;
    let hd = config.head_dim;
    let mut s = BTreeMap::new();
    s.insert(names::VISION.to_string(), vec![config.d_vision, config.d_descriptor]);
    s.insert(names::FC1_W.to_string(), vec![d, config.d_vision]);
    s.insert(names::FC1_B.to_string(), vec![d]);
    s.insert(names::FC2_W.to_string(), vec![d, d]);
    s.insert(names::FC2_B.to_string(), vec![d]);
    s.insert(names::EMBED.to_string(), vec![config.vocab_size, d]);
    s.insert(names::FINAL_NORM.to_string(), vec![d]);
    s.insert(names::HEAD.to_string(), vec![config.vocab_size, d]);
    for (i, l) in layers.iter().enumerate() {
        let inner = l.n_heads * hd;
        let f = l.d_ffn;
        let shapes: [(&str, Vec<usize>); 10] = [
            (names::ATTN_NORM, vec![d]),
            (names::Q, vec![inner, d]),
            (names::K, vec![inner, d]),
            (names::V, vec![inner, d]),
            (names::O, vec![d, inner]),
            (names::MLP_NORM, vec![d]),
            (names::UP_W, vec![f, d]),
            (names::UP_B, vec![f]),
            (names::DOWN_W, vec![d, f]),
            (names::DOWN_B, vec![d]),
        ];
        for (suffix, shape) in shapes {
            s.insert(names::layer(i, suffix), shape);
        }
    }
    s
}

fn is_gain(name: &str) -> bool {
    name.ends_with("norm.weight")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

impl Model {
    /// Deterministic initialization: normal(0, `init_std`) for learned matrices,
    /// unit norm gains, zero biases, and normal(0, 1/sqrt(d_descriptor)) for
    /// the frozen vision stub.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = vec![
            LayerShape {
                n_heads: config.n_heads,
                d_ffn: config.d_ffn,
            };
            config.n_layers
        ];
        let mut rng = rng::stream(seed, "init");
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut params = BTreeMap::new();
        for (name, shape) in expected_shapes(config, &layers) {
            let t = if is_gain(&name) {
                Tensor::ones(&shape)
            } else if is_bias(&name) {
                Tensor::zeros(&shape)
            } else {
                let std = if name == names::VISION {
                    1.0 / (config.d_descriptor as f64).sqrt()
                } else {
                    config.init_std
                };
                Tensor::from_fn(&shape, |_| std * std_normal.sample(&mut rng))
            };
            params.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            layers,
            params,
            lora: BTreeMap::new(),
        })
    }

    /// Assembles a model from stored parts, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        layers: Vec<LayerShape>,
        params: BTreeMap<String, Tensor>,
        lora: BTreeMap<String, LoraAdapter>,
    ) -> Result<Self> {
        let expected = expected_shapes(&config, &layers);
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Contract(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        for l in &layers {
            if l.n_heads == 0 || l.d_ffn == 0 {
                return Err(Error::Contract("layer widths must be at least 1".into()));
            }
        }
        let model = Self {
            config,
            layers,
            params,
            lora: BTreeMap::new(),
        };
        let mut model = model;
        for (target, adapter) in lora {
            model.insert_adapter(target, adapter)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.lora
    }

    /// Looks up a base parameter or a LoRA factor (`{target}.lora_a` /
    /// `{target}.lora_b`).
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        if let Some(t) = self.params.get(name) {
            return Some(t);
        }
        let (target, which) = lora::split_name(name)?;
        let a = self.lora.get(target)?;
        Some(if which == 'a' { &a.a } else { &a.b })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if self.params.contains_key(name) {
            return self.params.get_mut(name);
        }
        let (target, which) = lora::split_name(name)?;
        let a = self.lora.get_mut(target)?;
        Some(if which == 'a' { &mut a.a } else { &mut a.b })
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensor_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Every tensor name: base parameters then adapter factors.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.params.keys().cloned().collect();
        for target in self.lora.keys() {
            out.push(lora::factor_name(target, 'a'));
            out.push(lora::factor_name(target, 'b'));
        }
        out
    }

    /// Maps every scope to the names it owns. Adapter factors belong to the
    /// scope of the matrix they adapt.
    pub fn param_partition(&self) -> BTreeMap<Scope, Vec<String>> {
        let mut out: BTreeMap<Scope, Vec<String>> = BTreeMap::new();
        for name in self.tensor_names() {
            out.entry(Scope::of(&name)).or_default().push(name);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters of the transformer layers (the compression-ratio
    /// denominator).
    pub fn decoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| matches!(Scope::of(n), Scope::Layer(_)))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and 32-bit payloads of every tensor.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for name in self.tensor_names() {
            let t = self.tensor(&name).expect("listed tensor exists");
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in t.to_f32_vec() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces structure after surgery. Caller guarantees consistency; the
    /// result is re-validated.
    pub(crate) fn rebuild(
        &mut self,
        layers: Vec<LayerShape>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<()> {
        if !self.lora.is_empty() {
            return Err(Error::Contract("merge LoRA adapters before surgery".into()));
        }
        let rebuilt = Model::from_parts(self.config.clone(), layers, params, BTreeMap::new())?;
        *self = rebuilt;
        Ok(())
    }

    /// Samples a random matrix with the initializer's scale. Used for
    /// adapters.
    pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Tensor::from_fn(shape, |_| std * n.sample(rng))
    }
}
