//! Layer-level Block Influence and group-level Taylor importance.

use prunekit_tensor::{Graph, Tensor};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, Capture, Model, Scope, Triplet};
use crate::recovery::losses::sft_graph;
use crate::rng;

pub const DEFAULT_CALIBRATION_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub triplets: Vec<Triplet>,
}

impl CalibrationSet {
    /// Draws `n` distinct triplets from `pool` with a seeded stream.
    pub fn sample(pool: &[Triplet], n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > pool.len() {
            return Err(Error::param(format!(
                "calibration size {n} must be in 1..={}",
                pool.len()
            )));
        }
        let mut rng = rng::stream(seed, "calibration");
        let picks = index::sample(&mut rng, pool.len(), n);
        Ok(Self {
            triplets: picks.into_iter().map(|i| pool[i].clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfluenceReport {
    /// `BI_i` per layer, in `[0, 2]`.
    pub scores: Vec<f64>,
    /// Token rows averaged per layer.
    pub tokens_used: usize,
    /// Rows skipped because one of the two states had zero norm, summed over
    /// layers.
    pub excluded_rows: usize,
    /// Layer indices by ascending score, ties by index.
    pub ranking: Vec<usize>,
}

/// Block Influence from per-sample boundary states (`states[s][i]` is
/// boundary `i` of sample `s`, each `[T_s, d]`).
pub fn block_influence_from_states(states: &[Vec<Tensor>]) -> Result<BlockInfluenceReport> {
    let n_layers = states
        .first()
        .map(|s| s.len().saturating_sub(1))
        .ok_or_else(|| Error::param("block influence needs at least one sample"))?;
    let mut sums = vec![0.0; n_layers];
    let mut counts = vec![0usize; n_layers];
    let mut excluded = 0;
    let mut tokens = 0;
    for sample in states {
        if sample.len() != n_layers + 1 {
            return Err(Error::Contract("samples disagree on layer count".into()));
        }
        let (rows, _) = sample[0].dims2()?;
        tokens += rows;
        for i in 0..n_layers {
            for t in 0..rows {
                let a = sample[i].row(t);
                let b = sample[i + 1].row(t);
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    excluded += 1;
                    continue;
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                sums[i] += (dot / (na * nb)).clamp(-1.0, 1.0);
                counts[i] += 1;
            }
        }
    }
    let scores: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { 1.0 - s / c as f64 })
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("non-finite block influence".into()));
    }
    let mut ranking: Vec<usize> = (0..n_layers).collect();
    ranking.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(BlockInfluenceReport {
        scores,
        tokens_used: tokens,
        excluded_rows: excluded,
        ranking,
    })
}

pub fn block_influence(model: &Model, calib: &CalibrationSet) -> Result<BlockInfluenceReport> {
    let mut states = Vec::with_capacity(calib.len());
    for t in &calib.triplets {
        let trace = model.forward(t, &Capture::All)?;
        states.push(trace.hidden.into_values().collect());
    }
    block_influence_from_states(&states)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    AttentionHead,
    MlpChannel,
}

/// A contiguous index range of one parameter along one axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSlice {
    pub param: String,
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

impl MemberSlice {
    /// Flat element indices covered in a tensor of `shape`.
    pub fn flat_indices(&self, shape: &[usize]) -> Vec<usize> {
        let outer: usize = shape[..self.axis].iter().product();
        let extent = shape[self.axis];
        let inner: usize = shape[self.axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * self.len * inner);
        for o in 0..outer {
            for e in self.start..self.start + self.len {
                let base = (o * extent + e) * inner;
                out.extend(base..base + inner);
            }
        }
        out
    }
}

/// A dependency-closed unit: one attention head or one MLP channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneGroup {
    pub id: usize,
    pub kind: GroupKind,
    pub layer: usize,
    /// Head or channel index inside the layer.
    pub index: usize,
    pub members: Vec<MemberSlice>,
    pub importance: f64,
}

impl PruneGroup {
    /// Parameters removed with this group, given the model's shapes.
    pub fn param_count(&self, model: &Model) -> usize {
        self.members
            .iter()
            .map(|m| {
                let shape = model.params()[&m.param].shape();
                shape.iter().product::<usize>() / shape[m.axis] * m.len
            })
            .sum()
    }
}

/// One group per attention head and per MLP channel, layer by layer (heads
/// first, then channels).
pub fn build_dependency_groups(model: &Model) -> Vec<PruneGroup> {
    let hd = model.config().head_dim;
    let mut out = Vec::new();
    for (layer, shape) in model.layers().iter().enumerate() {
        let p = |s: &str| names::layer(layer, s);
        for h in 0..shape.n_heads {
            let rows = |name: &str| MemberSlice {
                param: p(name),
                axis: 0,
                start: h * hd,
                len: hd,
            };
            out.push(PruneGroup {
                id: out.len(),
                kind: GroupKind::AttentionHead,
                layer,
                index: h,
                members: vec![
                    rows(names::Q),
                    rows(names::K),
                    rows(names::V),
                    MemberSlice {
                        param: p(names::O),
                        axis: 1,
                        start: h * hd,
                        len: hd,
                    },
                ],
                importance: 0.0,
            });
        }
        for c in 0..shape.d_ffn {
            let one = |name: &str, axis: usize| MemberSlice {
                param: p(name),
                axis,
                start: c,
                len: 1,
            };
            out.push(PruneGroup {
                id: out.len(),
                kind: GroupKind::MlpChannel,
                layer,
                index: c,
                members: vec![one(names::UP_W, 0), one(names::UP_B, 0), one(names::DOWN_W, 1)],
                importance: 0.0,
            });
        }
    }
    out
}

/// Fills `importance` with the calibration mean of `Σ |∂L/∂w · w|` over each
/// group's member weights, where `L` is the response cross-entropy of one
/// triplet. One backward pass per triplet; per-group sums are reduced in
/// calibration order.
pub fn taylor_group_importance(
    model: &Model,
    groups: &[PruneGroup],
    calib: &CalibrationSet,
) -> Result<Vec<PruneGroup>> {
    if calib.is_empty() {
        return Err(Error::param("calibration set is empty"));
    }
    let mut totals = vec![0.0; groups.len()];
    let mut params: Vec<&str> = groups
        .iter()
        .flat_map(|g| g.members.iter().map(|m| m.param.as_str()))
        .collect();
    params.sort_unstable();
    params.dedup();
    let layer_param = |n: &str| matches!(Scope::of(n), Scope::Layer(_));

    for t in &calib.triplets {
        let mut g = Graph::new();
        let b = model.bind(&mut g, &layer_param);
        let trace = model.forward_graph(&mut g, &b, t)?;
        let loss = sft_graph(&mut g, &trace, t)?;
        g.backward(loss)?;
        let mut grads = std::collections::HashMap::new();
        for &name in &params {
            let var = b.var(name)?;
            let grad = g
                .grad(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(var)));
            if !grad.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: name.to_string(),
                });
            }
            grads.insert(name, grad);
        }
        for (total, group) in totals.iter_mut().zip(groups) {
            let mut s = 0.0;
            for m in &group.members {
                let w = &model.params()[&m.param];
                let gr = &grads[m.param.as_str()];
                for i in m.flat_indices(w.shape()) {
                    s += (gr.data()[i] * w.data()[i]).abs();
                }
            }
            *total += s;
        }
    }
    let n = calib.len() as f64;
    Ok(groups
        .iter()
        .zip(totals)
        .map(|(g, t)| PruneGroup {
            importance: t / n,
            ..g.clone()
        })
        .collect())
}

/// Importance for either pruning mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ImportanceReport {
    Layers(BlockInfluenceReport),
    Groups { groups: Vec<PruneGroup> },
}

/// One exported score line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: usize,
    pub layer: usize,
    pub kind: String,
    pub index: usize,
    pub score: f64,
}

impl ImportanceReport {
    pub fn score_lines(&self) -> Vec<ScoreLine> {
        match self {
            ImportanceReport::Layers(r) => r
                .scores
                .iter()
                .enumerate()
                .map(|(i, &s)| ScoreLine {
                    id: i,
                    layer: i,
                    kind: "layer".into(),
                    index: i,
                    score: s,
                })
                .collect(),
            ImportanceReport::Groups { groups } => groups
                .iter()
                .map(|g| ScoreLine {
                    id: g.id,
                    layer: g.layer,
                    kind: match g.kind {
                        GroupKind::AttentionHead => "attention-head".into(),
                        GroupKind::MlpChannel => "mlp-channel".into(),
                    },
                    index: g.index,
                    score: g.importance,
                })
                .collect(),
        }
    }
}
