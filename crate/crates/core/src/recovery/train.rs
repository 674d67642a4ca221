use std::collections::{BTreeMap, HashMap};

use prunekit_tensor::{Graph, Tensor, TensorError, Var};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::config::{RecoveryConfig, TrainScope};
use super::losses::{boundary_from_end, hidden_match_graph, kd_graph, match_capture, sft_graph};
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::eval::exact_match_accuracy;
use crate::model::{Capture, ForwardTrace, Model, Scope, Triplet};
use crate::rng;

/// Per-step loss values (batch means) and the coefficients that combine
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_sft: f64,
    pub l_logits: f64,
    pub l_match: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_effective: f64,
    pub total: f64,
    /// Mean exact-match accuracy on the monitoring pool, when evaluated.
    pub eval: Option<f64>,
}

impl LossBreakdown {
    pub fn recombined(&self) -> f64 {
        self.alpha * self.l_sft + self.beta * self.l_logits + self.gamma_effective * self.l_match
    }
}

/// Optional accuracy monitoring during training.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub pool: &'a [Triplet],
    pub every: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: Model,
    pub history: Vec<LossBreakdown>,
    /// Ids of the training triplets actually used, ascending.
    pub used_ids: Vec<u64>,
}

/// Seeded subsample of `round(fraction · n)` triplets (at least one),
/// returned in pool order.
pub fn subsample(pool: &[Triplet], fraction: f64, seed: u64) -> Result<Vec<&Triplet>> {
    if pool.is_empty() {
        return Err(Error::Data("training pool is empty".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("data_fraction must be in (0,1], got {fraction}")));
    }
    let k = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len());
    let mut rng = rng::stream(seed, "subsample");
    let mut picks = index::sample(&mut rng, pool.len(), k).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| &pool[i]).collect())
}

fn trainable_predicate(config: &RecoveryConfig) -> impl Fn(&str) -> bool + '_ {
    move |name: &str| match Scope::of(name) {
        Scope::Vision => false,
        Scope::Projector => true,
        _ => match (config.scope, &config.lora) {
            (TrainScope::ProjectorOnly, _) => false,
            (TrainScope::ProjectorLlm, Some(_)) => {
                name.ends_with(".lora_a") || name.ends_with(".lora_b")
            }
            (TrainScope::ProjectorLlm, None) => true,
        },
    }
}

/// Teacher traces, filled on first use of each triplet.
struct TeacherCache<'t> {
    teacher: &'t Model,
    capture: Capture,
    traces: HashMap<u64, ForwardTrace>,
    n_layers: usize,
}

fn numeric(step: usize, what: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            breakdown: format!("{what}: non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `student` on a seeded `data_fraction` subsample of `pool`.
///
/// Only scope-selected parameters change; the vision stub never does. With
/// LoRA, adapters are attached before the first step and merged after the
/// last. `teacher` is required when `beta` or `gamma` is positive.
pub fn train(
    mut student: Model,
    teacher: Option<&Model>,
    pool: &[Triplet],
    config: &RecoveryConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let used = subsample(pool, config.data_fraction, config.optimizer.seed)?;
    let used_ids: Vec<u64> = used.iter().map(|t| t.id).collect();
    let d = student.d_model();
    let gamma_eff = config.gamma_effective(d);

    let mut cache = match (config.uses_teacher(), teacher) {
        (false, _) => None,
        (true, None) => return Err(Error::param("KD or hidden matching needs a teacher")),
        (true, Some(teacher)) => {
            if teacher.d_model() != d {
                return Err(Error::Contract("teacher and student residual widths differ".into()));
            }
            let capture = if config.gamma > 0.0 {
                for &k in &config.match_layers {
                    boundary_from_end(student.n_layers(), k)?;
                }
                match_capture(teacher.n_layers(), &config.match_layers)?
            } else {
                Capture::None
            };
            Some(TeacherCache {
                teacher,
                capture,
                traces: HashMap::new(),
                n_layers: teacher.n_layers(),
            })
        }
    };

    if let (TrainScope::ProjectorLlm, Some(lora)) = (config.scope, &config.lora) {
        student.attach_lora(lora, rng::derive_seed(config.optimizer.seed, "lora"))?;
    }
    let trainable = trainable_predicate(config);
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut batch_rng = rng::stream(config.optimizer.seed, "batches");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(config.optimizer.steps);

    for step in 0..config.optimizer.steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut sums = [0.0f64; 4];
        let bs = config.optimizer.batch_size;
        for _ in 0..bs {
            if cursor == order.len() {
                order = (0..used.len()).collect();
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let t = used[order[cursor]];
            cursor += 1;

            let mut g = Graph::new();
            let b = student.bind(&mut g, &trainable);
            let gt = student
                .forward_graph(&mut g, &b, t)
                .map_err(numeric(step, "forward"))?;
            let sft = sft_graph(&mut g, &gt, t).map_err(numeric(step, "l_sft"))?;
            let mut total = g.scale(sft, config.alpha)?;
            let mut kd_val = 0.0;
            let mut match_val = 0.0;
            if let Some(cache) = &mut cache {
                if !cache.traces.contains_key(&t.id) {
                    let trace = cache.teacher.forward(t, &cache.capture)?;
                    cache.traces.insert(t.id, trace);
                }
                let tt = &cache.traces[&t.id];
                if config.beta > 0.0 {
                    let kd = kd_graph(
                        &mut g,
                        gt.logits,
                        &gt.layout,
                        &tt.logits,
                        &tt.layout,
                        config.tau,
                        config.kd_direction,
                    )
                    .map_err(numeric(step, "l_logits"))?;
                    kd_val = g.value(kd).item();
                    let scaled = g.scale(kd, config.beta)?;
                    total = g.add(total, scaled)?;
                }
                if config.gamma > 0.0 {
                    let mut s: Vec<Var> = Vec::new();
                    let mut te: Vec<&Tensor> = Vec::new();
                    for &k in &config.match_layers {
                        s.push(gt.hidden[boundary_from_end(student.n_layers(), k)?]);
                        te.push(&tt.hidden[&boundary_from_end(cache.n_layers, k)?]);
                    }
                    let m = hidden_match_graph(&mut g, &s, &te).map_err(numeric(step, "l_match"))?;
                    match_val = g.value(m).item();
                    let scaled = g.scale(m, gamma_eff)?;
                    total = g.add(total, scaled)?;
                }
            }
            let sft_val = g.value(sft).item();
            let total_val = g.value(total).item();
            if !total_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    breakdown: format!(
                        "l_sft={sft_val} l_logits={kd_val} l_match={match_val} total={total_val}"
                    ),
                });
            }
            sums[0] += sft_val;
            sums[1] += kd_val;
            sums[2] += match_val;
            sums[3] += total_val;
            g.backward(total)
                .map_err(|e| numeric(step, "backward")(e.into()))?;
            let mut names: Vec<(&String, &Var)> = b.iter().filter(|(n, _)| trainable(n)).collect();
            names.sort();
            for (name, &var) in names {
                let Some(grad) = g.take_grad(var) else { continue };
                if !grad.is_finite() {
                    return Err(Error::NonFiniteGradient { param: name.clone() });
                }
                match grads.get_mut(name) {
                    Some(acc) => acc.add_scaled(&grad, 1.0)?,
                    None => {
                        grads.insert(name.clone(), grad);
                    }
                }
            }
        }
        for gr in grads.values_mut() {
            gr.scale_in_place(1.0 / bs as f64);
        }
        optimizer.step(&mut student, &grads)?;

        let n = bs as f64;
        let eval = match monitor {
            Some(m) if m.every > 0 && (step + 1) % m.every == 0 => {
                Some(exact_match_accuracy(&student, m.pool)?)
            }
            _ => None,
        };
        history.push(LossBreakdown {
            step,
            l_sft: sums[0] / n,
            l_logits: sums[1] / n,
            l_match: sums[2] / n,
            alpha: config.alpha,
            beta: config.beta,
            gamma_effective: gamma_eff,
            total: sums[3] / n,
            eval,
        });
    }
    student.merge_lora()?;
    Ok(TrainOutcome {
        student,
        history,
        used_ids,
    })
}
