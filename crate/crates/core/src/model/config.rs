use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Construction hyper-parameters of the toy multimodal decoder.
///
/// `n_layers`, `n_heads` and `d_ffn` describe the model as built; after
/// pruning, [`crate::model::Model::layers`] is authoritative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub n_visual_tokens: usize,
    pub d_vision: usize,
    /// Width of one synthetic image-descriptor row fed to the vision stub.
    pub d_descriptor: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Standard deviation of learned weight matrices at initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// The reference toy shape used throughout the tests.
    pub fn reference() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            d_ffn: 256,
            n_visual_tokens: 8,
            d_vision: 32,
            d_descriptor: 16,
            max_seq_len: 64,
            rms_eps: default_eps(),
            rope_base: default_rope_base(),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ffn", self.d_ffn),
            ("n_visual_tokens", self.n_visual_tokens),
            ("d_vision", self.d_vision),
            ("d_descriptor", self.d_descriptor),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::param(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::param(format!(
                "n_heads ({}) x head_dim ({}) must equal d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::param("head_dim must be even for rotary embeddings"));
        }
        if self.n_visual_tokens >= self.max_seq_len {
            return Err(Error::param("n_visual_tokens must leave room for text"));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_base > 1.0) || !(self.init_std > 0.0) {
            return Err(Error::param("rms_eps and init_std must be > 0 and rope_base > 1"));
        }
        Ok(())
    }
}

/// Per-layer inner widths; the residual width never changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_heads: usize,
    pub d_ffn: usize,
}
