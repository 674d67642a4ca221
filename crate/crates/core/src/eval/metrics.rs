use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tasks::TaskKind;
use crate::error::{Error, Result};
use crate::model::{Model, Triplet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub per_task: BTreeMap<TaskKind, TaskScore>,
    /// Mean of per-task accuracies.
    pub avg: f64,
    pub reference: Option<String>,
    /// `100 · mean(acc / reference acc)` over tasks the reference scores
    /// above zero.
    pub avg_pct: Option<f64>,
}

/// Greedy decode scored by exact match. Items of a known task decode over
/// that task's answer tokens only.
fn is_correct(model: &Model, t: &Triplet) -> Result<bool> {
    let limit = TaskKind::of(t).map_or(model.config().vocab_size, |k| k.answer_count());
    Ok(model.greedy_decode_within(t, t.response.len(), limit)? == t.response)
}

/// Fraction of triplets whose (task-restricted) greedy decode matches the
/// response exactly.
pub fn exact_match_accuracy(model: &Model, pool: &[Triplet]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Data("evaluation pool is empty".into()));
    }
    let mut correct = 0usize;
    for t in pool {
        correct += usize::from(is_correct(model, t)?);
    }
    Ok(correct as f64 / pool.len() as f64)
}

pub fn evaluate(
    model: &Model,
    pool: &[Triplet],
    name: &str,
    reference: Option<&EvalReport>,
) -> Result<EvalReport> {
    if pool.is_empty() {
        return Err(Error::Data("evaluation pool is empty".into()));
    }
    let mut counts: BTreeMap<TaskKind, (usize, usize)> = BTreeMap::new();
    for t in pool {
        let kind = TaskKind::of(t)
            .ok_or_else(|| Error::Data(format!("triplet {} has no task marker", t.id)))?;
        let e = counts.entry(kind).or_default();
        e.0 += usize::from(is_correct(model, t)?);
        e.1 += 1;
    }
    let per_task: BTreeMap<TaskKind, TaskScore> = counts
        .into_iter()
        .map(|(k, (c, n))| {
            (
                k,
                TaskScore {
                    correct: c,
                    total: n,
                    accuracy: c as f64 / n as f64,
                },
            )
        })
        .collect();
    let avg = per_task.values().map(|s| s.accuracy).sum::<f64>() / per_task.len() as f64;
    let avg_pct = reference.and_then(|r| relative_pct(&per_task, r));
    Ok(EvalReport {
        model: name.to_string(),
        per_task,
        avg,
        reference: reference.map(|r| r.model.clone()),
        avg_pct,
    })
}

fn relative_pct(per_task: &BTreeMap<TaskKind, TaskScore>, reference: &EvalReport) -> Option<f64> {
    let ratios: Vec<f64> = per_task
        .iter()
        .filter_map(|(k, s)| {
            let r = reference.per_task.get(k)?;
            (r.accuracy > 0.0).then(|| s.accuracy / r.accuracy)
        })
        .collect();
    if ratios.is_empty() {
        return None;
    }
    Some(100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64)
}

impl EvalReport {
    /// Re-expresses this report relative to `reference`.
    pub fn relative_to(&self, reference: &EvalReport) -> EvalReport {
        EvalReport {
            reference: Some(reference.model.clone()),
            avg_pct: relative_pct(&self.per_task, reference),
            ..self.clone()
        }
    }
}
