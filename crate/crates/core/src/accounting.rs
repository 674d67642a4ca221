//! Closed-form parameter and FLOPs accounting over a shape record.
//!
//! A multiply-accumulate counts as two FLOPs. For a sequence of `T` tokens,
//! per decoder layer with `H` heads of width `hd` and MLP width `f`:
//!
//! * attention projections: `2·T·(4·d·H·hd)`
//! * attention scores and mixing: `2·T²·H·hd` (the causal half of the two
//!   `T×T` products)
//! * MLP: `2·T·k·d·f`, `k = 2` for a GELU MLP, `3` for a gated MLP
//!
//! plus the output head `2·T·d·V`, the projector
//! `2·N_v·(d_vision·d + d·d)` and the vision front end (a linear stub
//! `2·N_v·d_desc·d_vision`, or a ViT-style tower with full bidirectional
//! attention).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerShape, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MlpKind {
    /// `down(gelu(up(x)))`: two matrices.
    Gelu,
    /// `down(act(gate(x)) * up(x))`: three matrices.
    Gated,
}

impl MlpKind {
    pub fn matrices(self) -> usize {
        match self {
            MlpKind::Gelu => 2,
            MlpKind::Gated => 3,
        }
    }
}

/// A ViT-style encoder (for accounting only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionTower {
    pub layers: usize,
    pub width: usize,
    pub ffn: usize,
    /// Sequence length inside the tower (patches plus class token).
    pub tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VisionFrontEnd {
    Stub { d_descriptor: usize },
    Tower(VisionTower),
}

/// Everything the closed forms need; derivable from a model or written by
/// hand for large reference shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub vocab_size: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub layers: Vec<LayerShape>,
    pub n_visual_tokens: usize,
    pub d_vision: usize,
    pub mlp: MlpKind,
    pub mlp_bias: bool,
    pub vision: VisionFrontEnd,
}

impl ShapeRecord {
    /// LLaVA-v1.5-7B: Vicuna-7B decoder and a CLIP ViT-L/14 tower at 336 px.
    pub fn llava_7b() -> Self {
        Self {
            vocab_size: 32_000,
            d_model: 4096,
            head_dim: 128,
            layers: vec![
                LayerShape {
                    n_heads: 32,
                    d_ffn: 11_008
                };
                32
            ],
            n_visual_tokens: 576,
            d_vision: 1024,
            mlp: MlpKind::Gated,
            mlp_bias: false,
            vision: VisionFrontEnd::Tower(VisionTower {
                layers: 24,
                width: 1024,
                ffn: 4096,
                tokens: 577,
            }),
        }
    }
}

impl Model {
    pub fn shape_record(&self) -> ShapeRecord {
        let c = self.config();
        ShapeRecord {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            head_dim: c.head_dim,
            layers: self.layers().to_vec(),
            n_visual_tokens: c.n_visual_tokens,
            d_vision: c.d_vision,
            mlp: MlpKind::Gelu,
            mlp_bias: true,
            vision: VisionFrontEnd::Stub {
                d_descriptor: c.d_descriptor,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountScope {
    Vision,
    Projector,
    Layer(usize),
    /// All transformer layers: the compression-ratio denominator.
    Decoder,
    /// Embedding, final norm and output head.
    Head,
    Total,
}

/// Parameters of one decoder layer.
pub fn layer_params(shape: &ShapeRecord, layer: &LayerShape) -> u64 {
    let d = shape.d_model as u64;
    let inner = (layer.n_heads * shape.head_dim) as u64;
    let f = layer.d_ffn as u64;
    let mut p = 2 * d + 4 * d * inner + shape.mlp.matrices() as u64 * d * f;
    if shape.mlp_bias {
        p += f + d;
    }
    p
}

pub fn count_params(shape: &ShapeRecord, scope: CountScope) -> u64 {
    let d = shape.d_model as u64;
    let v = shape.vocab_size as u64;
    let dv = shape.d_vision as u64;
    match scope {
        CountScope::Vision => match shape.vision {
            VisionFrontEnd::Stub { d_descriptor } => dv * d_descriptor as u64,
            VisionFrontEnd::Tower(t) => {
                let w = t.width as u64;
                t.layers as u64 * (4 * w * w + 2 * w * t.ffn as u64)
            }
        },
        CountScope::Projector => dv * d + d + d * d + d,
        CountScope::Layer(i) => shape.layers.get(i).map_or(0, |l| layer_params(shape, l)),
        CountScope::Decoder => shape.layers.iter().map(|l| layer_params(shape, l)).sum(),
        CountScope::Head => 2 * v * d + d,
        CountScope::Total => [
            CountScope::Vision,
            CountScope::Projector,
            CountScope::Decoder,
            CountScope::Head,
        ]
        .into_iter()
        .map(|s| count_params(shape, s))
        .sum(),
    }
}

/// FLOPs per component for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub vision: f64,
    pub projector: f64,
    pub layers: f64,
    pub head: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.vision + self.projector + self.layers + self.head
    }
}

pub fn layer_flops(shape: &ShapeRecord, layer: &LayerShape, seq_len: usize) -> f64 {
    let t = seq_len as f64;
    let d = shape.d_model as f64;
    let inner = (layer.n_heads * shape.head_dim) as f64;
    let f = layer.d_ffn as f64;
    let k = shape.mlp.matrices() as f64;
    2.0 * t * 4.0 * d * inner + 2.0 * t * t * inner + 2.0 * t * k * d * f
}

/// Forward FLOPs for a sequence of `seq_len` tokens (visual tokens
/// included).
pub fn estimate_flops(shape: &ShapeRecord, seq_len: usize) -> FlopsBreakdown {
    let t = seq_len as f64;
    let d = shape.d_model as f64;
    let nv = shape.n_visual_tokens as f64;
    let dv = shape.d_vision as f64;
    let vision = match shape.vision {
        VisionFrontEnd::Stub { d_descriptor } => 2.0 * nv * d_descriptor as f64 * dv,
        VisionFrontEnd::Tower(tw) => {
            let tv = tw.tokens as f64;
            let w = tw.width as f64;
            let per_layer =
                2.0 * tv * (4.0 * w * w + 2.0 * w * tw.ffn as f64) + 4.0 * tv * tv * w;
            tw.layers as f64 * per_layer
        }
    };
    FlopsBreakdown {
        vision,
        projector: 2.0 * nv * (dv * d + d * d),
        layers: shape.layers.iter().map(|l| layer_flops(shape, l, seq_len)).sum(),
        head: 2.0 * t * d * shape.vocab_size as f64,
    }
}

/// `1 - pruned / original` over decoder parameters.
pub fn compression_ratio(original: &ShapeRecord, pruned: &ShapeRecord) -> f64 {
    let o = count_params(original, CountScope::Decoder) as f64;
    let p = count_params(pruned, CountScope::Decoder) as f64;
    1.0 - p / o
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    Layerwise,
    Widthwise,
}

impl std::fmt::Display for PruneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneMode::Layerwise => "layerwise",
            PruneMode::Widthwise => "widthwise",
        })
    }
}

impl std::str::FromStr for PruneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layerwise" | "depth" => Ok(PruneMode::Layerwise),
            "widthwise" | "width" => Ok(PruneMode::Widthwise),
            other => Err(Error::param(format!("unknown prune mode {other}"))),
        }
    }
}

/// Shape after compressing the decoder by at least `ratio` of its
/// parameters, assuming interchangeable units.
///
/// Layerwise drops the fewest equal-cost layers whose removal reaches the
/// target, always keeping at least one. Widthwise shrinks every layer by the
/// same fraction: heads are rounded to the nearest count, then the MLP width
/// is cut until the layer has given up at least `ratio` of its parameters,
/// subject to the floors of one head and `head_dim` channels.
pub fn project_shape(shape: &ShapeRecord, mode: PruneMode, ratio: f64) -> Result<ShapeRecord> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::param(format!("ratio must be in (0,1), got {ratio}")));
    }
    let mut out = shape.clone();
    if ratio == 0.0 {
        return Ok(out);
    }
    match mode {
        PruneMode::Layerwise => {
            let total = count_params(shape, CountScope::Decoder) as f64;
            let target = ratio * total;
            let mut order: Vec<usize> = (0..shape.layers.len().saturating_sub(1)).collect();
            order.sort_by_key(|&i| (std::cmp::Reverse(layer_params(shape, &shape.layers[i])), i));
            let mut removed = 0.0;
            let mut drop = Vec::new();
            for i in order {
                if removed >= target {
                    break;
                }
                removed += layer_params(shape, &shape.layers[i]) as f64;
                drop.push(i);
            }
            if removed < target {
                return Err(Error::InfeasiblePlan {
                    target: ratio,
                    max_achievable: removed / total,
                });
            }
            out.layers = shape
                .layers
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop.contains(i))
                .map(|(_, l)| *l)
                .collect();
        }
        PruneMode::Widthwise => {
            let d = shape.d_model as u64;
            let per_channel = shape.mlp.matrices() as u64 * d + u64::from(shape.mlp_bias);
            let mut max_removed = 0u64;
            let mut total = 0u64;
            for (i, l) in shape.layers.iter().enumerate() {
                let before = layer_params(shape, l);
                total += before;
                let floor = LayerShape {
                    n_heads: 1,
                    d_ffn: shape.head_dim.min(l.d_ffn),
                };
                max_removed += before - layer_params(shape, &floor);
                let keep_budget = (1.0 - ratio) * before as f64;
                let heads = ((l.n_heads as f64 * (1.0 - ratio)).round() as usize).clamp(1, l.n_heads);
                let with_heads = LayerShape {
                    n_heads: heads,
                    d_ffn: 0,
                };
                let fixed = layer_params(shape, &with_heads) as f64;
                let room = ((keep_budget - fixed) / per_channel as f64).floor();
                let ffn = if room < floor.d_ffn as f64 {
                    floor.d_ffn
                } else {
                    (room as usize).min(l.d_ffn)
                };
                out.layers[i] = LayerShape {
                    n_heads: heads,
                    d_ffn: ffn,
                };
            }
            let achieved = compression_ratio(shape, &out);
            if achieved + 1e-12 < ratio {
                return Err(Error::InfeasiblePlan {
                    target: ratio,
                    max_achievable: max_removed as f64 / total as f64,
                });
            }
        }
    }
    Ok(out)
}
