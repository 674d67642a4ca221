//! Prune planning and structural surgery.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::accounting::{compression_ratio, PruneMode};
use crate::error::{Error, Result};
use crate::importance::{GroupKind, ImportanceReport, PruneGroup};
use crate::model::{names, LayerShape, Model};

/// Per-layer minimums for widthwise pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Floors {
    pub min_heads: usize,
    /// Defaults to `head_dim` when unset.
    pub min_channels: Option<usize>,
}

impl Default for Floors {
    fn default() -> Self {
        Self {
            min_heads: 1,
            min_channels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub mode: PruneMode,
    pub target_ratio: f64,
    /// Sorted layer indices (layerwise) or group ids (widthwise).
    pub victims: Vec<usize>,
    /// Victim groups in id order; empty in layerwise mode.
    pub groups: Vec<PruneGroup>,
    pub predicted_params_removed: usize,
    pub predicted_ratio: f64,
    /// Checksum of the model the plan was made for.
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryEntry {
    /// `layer 3`, `layer 1 head 2`, `layer 0 channel 17`.
    pub victim: String,
    pub params_removed: usize,
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub model: Model,
    pub log: Vec<SurgeryEntry>,
    pub achieved_ratio: f64,
    pub layers: Vec<LayerShape>,
}

fn check_ratio(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::param(format!("ratio must be in (0,1), got {r}")))
    }
}

fn layer_param_count(model: &Model, layer: usize) -> usize {
    names::LAYER_PARAMS
        .iter()
        .map(|s| model.params()[&names::layer(layer, s)].numel())
        .sum()
}

/// Greedy lowest-importance-first selection until the predicted decoder
/// parameter removal reaches `target_ratio`.
pub fn plan(
    model: &Model,
    report: &ImportanceReport,
    target_ratio: f64,
    floors: &Floors,
) -> Result<PrunePlan> {
    check_ratio(target_ratio)?;
    let total = model.decoder_param_count();
    let target = target_ratio * total as f64;
    let mut removed = 0usize;
    let (mode, mut victims, mut groups) = match report {
        ImportanceReport::Layers(bi) => {
            if bi.scores.len() != model.n_layers() {
                return Err(Error::PlanMismatch(format!(
                    "report covers {} layers, model has {}",
                    bi.scores.len(),
                    model.n_layers()
                )));
            }
            let last = model.n_layers() - 1;
            let mut victims = Vec::new();
            for &i in bi.ranking.iter().filter(|&&i| i != last) {
                if removed as f64 >= target {
                    break;
                }
                removed += layer_param_count(model, i);
                victims.push(i);
            }
            (PruneMode::Layerwise, victims, Vec::new())
        }
        ImportanceReport::Groups { groups } => {
            let min_channels = floors.min_channels.unwrap_or(model.config().head_dim);
            if floors.min_heads == 0 || min_channels == 0 {
                return Err(Error::param("floors must keep at least one head and one channel"));
            }
            let mut heads: Vec<usize> = model.layers().iter().map(|l| l.n_heads).collect();
            let mut chans: Vec<usize> = model.layers().iter().map(|l| l.d_ffn).collect();
            let mut order: Vec<&PruneGroup> = groups.iter().collect();
            order.sort_by(|a, b| {
                a.importance
                    .total_cmp(&b.importance)
                    .then(a.layer.cmp(&b.layer))
                    .then(a.id.cmp(&b.id))
            });
            let mut victims = Vec::new();
            let mut chosen = Vec::new();
            for g in order {
                if removed as f64 >= target {
                    break;
                }
                if g.layer >= model.n_layers() {
                    return Err(Error::PlanMismatch(format!("group {} names layer {}", g.id, g.layer)));
                }
                let left = match g.kind {
                    GroupKind::AttentionHead => &mut heads[g.layer],
                    GroupKind::MlpChannel => &mut chans[g.layer],
                };
                let floor = match g.kind {
                    GroupKind::AttentionHead => floors.min_heads,
                    GroupKind::MlpChannel => min_channels,
                };
                if *left <= floor {
                    continue;
                }
                *left -= 1;
                removed += g.param_count(model);
                victims.push(g.id);
                chosen.push(g.clone());
            }
            (PruneMode::Widthwise, victims, chosen)
        }
    };
    if (removed as f64) < target {
        return Err(Error::InfeasiblePlan {
            target: target_ratio,
            max_achievable: removed as f64 / total as f64,
        });
    }
    victims.sort_unstable();
    groups.sort_by_key(|g| g.id);
    Ok(PrunePlan {
        mode,
        target_ratio,
        victims,
        groups,
        predicted_params_removed: removed,
        predicted_ratio: removed as f64 / total as f64,
        model_checksum: model.checksum(),
    })
}

/// Applies `plan` to a copy of `model`, physically removing the victims.
pub fn execute(model: &Model, plan: &PrunePlan) -> Result<PruneResult> {
    if model.checksum() != plan.model_checksum {
        return Err(Error::PlanMismatch(
            "model differs from the one the plan was made for (stale or already executed plan)".into(),
        ));
    }
    if !model.adapters().is_empty() {
        return Err(Error::Contract("merge LoRA adapters before surgery".into()));
    }
    let before_shape = model.shape_record();
    let before = model.decoder_param_count();
    let mut params = model.params().clone();
    let mut log = Vec::new();
    let layers = match plan.mode {
        PruneMode::Layerwise => {
            let drop: BTreeSet<usize> = plan.victims.iter().copied().collect();
            if drop.iter().any(|&i| i >= model.n_layers()) || drop.len() >= model.n_layers() {
                return Err(Error::PlanMismatch("layer victims do not fit the model".into()));
            }
            let mut kept = Vec::new();
            for i in 0..model.n_layers() {
                let taken: Vec<_> = names::LAYER_PARAMS
                    .iter()
                    .map(|s| (s, params.remove(&names::layer(i, s)).expect("layer tensor")))
                    .collect();
                if drop.contains(&i) {
                    log.push(SurgeryEntry {
                        victim: format!("layer {i}"),
                        params_removed: taken.iter().map(|(_, t)| t.numel()).sum(),
                    });
                    continue;
                }
                let new_index = kept.len();
                for (s, t) in taken {
                    params.insert(names::layer(new_index, s), t);
                }
                kept.push(model.layers()[i]);
            }
            kept
        }
        PruneMode::Widthwise => {
            let hd = model.config().head_dim;
            let mut drop_heads: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            let mut drop_chans: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            for g in &plan.groups {
                let shape = model
                    .layers()
                    .get(g.layer)
                    .ok_or_else(|| Error::PlanMismatch(format!("no layer {}", g.layer)))?;
                let (set, bound) = match g.kind {
                    GroupKind::AttentionHead => (drop_heads.entry(g.layer).or_default(), shape.n_heads),
                    GroupKind::MlpChannel => (drop_chans.entry(g.layer).or_default(), shape.d_ffn),
                };
                if g.index >= bound || !set.insert(g.index) {
                    return Err(Error::PlanMismatch(format!("invalid victim group {}", g.id)));
                }
                log.push(SurgeryEntry {
                    victim: match g.kind {
                        GroupKind::AttentionHead => format!("layer {} head {}", g.layer, g.index),
                        GroupKind::MlpChannel => format!("layer {} channel {}", g.layer, g.index),
                    },
                    params_removed: g.param_count(model),
                });
            }
            let mut layers = model.layers().to_vec();
            for (i, shape) in layers.iter_mut().enumerate() {
                let p = |s: &str| names::layer(i, s);
                let empty = BTreeSet::new();
                let dh = drop_heads.get(&i).unwrap_or(&empty);
                let dc = drop_chans.get(&i).unwrap_or(&empty);
                if !dh.is_empty() {
                    let keep: Vec<usize> = (0..shape.n_heads)
                        .filter(|h| !dh.contains(h))
                        .flat_map(|h| h * hd..(h + 1) * hd)
                        .collect();
                    for (name, axis) in [(names::Q, 0), (names::K, 0), (names::V, 0), (names::O, 1)] {
                        let t = params[&p(name)].index_select(axis, &keep)?;
                        params.insert(p(name), t);
                    }
                    shape.n_heads -= dh.len();
                }
                if !dc.is_empty() {
                    let keep: Vec<usize> = (0..shape.d_ffn).filter(|c| !dc.contains(c)).collect();
                    for (name, axis) in [(names::UP_W, 0), (names::UP_B, 0), (names::DOWN_W, 1)] {
                        let t = params[&p(name)].index_select(axis, &keep)?;
                        params.insert(p(name), t);
                    }
                    shape.d_ffn -= dc.len();
                }
            }
            layers
        }
    };
    let mut pruned = model.clone();
    pruned.rebuild(layers.clone(), params)?;
    let after = pruned.decoder_param_count();
    let logged: usize = log.iter().map(|e| e.params_removed).sum();
    if before != after + logged {
        return Err(Error::Contract(format!(
            "surgery log ({logged}) does not account for {before} -> {after}"
        )));
    }
    let achieved_ratio = compression_ratio(&before_shape, &pruned.shape_record());
    Ok(PruneResult {
        model: pruned,
        log,
        achieved_ratio,
        layers,
    })
}
