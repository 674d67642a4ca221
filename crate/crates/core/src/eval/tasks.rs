//! Synthetic multimodal tasks.
//!
//! Every image has [`N_SLOTS`] rows. Row `s` encodes a one-hot slot id, a
//! one-hot value in `0..N_VALUES` and a marker bit. Token ids:
//!
//! | ids | meaning |
//! |-----|---------|
//! | `0..32` | values (also used for counts) |
//! | `32..40` | slot references |
//! | `40` | visual-lookup task marker |
//! | `41` | visual-count task marker |
//! | `42` | prompt-echo task marker |

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Triplet};
use crate::rng;

pub const N_SLOTS: usize = 8;
pub const N_VALUES: usize = 32;
pub const SLOT_BASE: usize = N_VALUES;
pub const TASK_LOOKUP: usize = SLOT_BASE + N_SLOTS;
pub const TASK_COUNT: usize = TASK_LOOKUP + 1;
pub const TASK_ECHO: usize = TASK_LOOKUP + 2;
pub const MIN_VOCAB: usize = TASK_ECHO + 1;
pub const DESCRIPTOR_WIDTH: usize = N_SLOTS + N_VALUES + 1;
pub const ECHO_ARGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Answer: the value stored in the queried slot.
    VisualLookup,
    /// Answer: the number of marked slots.
    VisualCount,
    /// Answer: the first argument token of the prompt (no visual input
    /// needed).
    PromptEcho,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::VisualLookup, TaskKind::VisualCount, TaskKind::PromptEcho];

    pub fn marker(self) -> usize {
        match self {
            TaskKind::VisualLookup => TASK_LOOKUP,
            TaskKind::VisualCount => TASK_COUNT,
            TaskKind::PromptEcho => TASK_ECHO,
        }
    }

    /// Task of a triplet, read from its first prompt token.
    pub fn of(t: &Triplet) -> Option<TaskKind> {
        let first = *t.prompt.first()?;
        TaskKind::ALL.into_iter().find(|k| k.marker() == first)
    }

    /// Number of distinct answers.
    pub fn answer_count(self) -> usize {
        match self {
            TaskKind::VisualLookup | TaskKind::PromptEcho => N_VALUES,
            TaskKind::VisualCount => N_SLOTS + 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskKind::VisualLookup => "visual-lookup",
            TaskKind::VisualCount => "visual-count",
            TaskKind::PromptEcho => "prompt-echo",
        }
    }
}

/// Decoded image: per slot `(value, marked)`.
pub fn decode_image(image: &[f32]) -> Result<Vec<(usize, bool)>> {
    if image.len() != N_SLOTS * DESCRIPTOR_WIDTH {
        return Err(Error::Data(format!("image has {} values", image.len())));
    }
    (0..N_SLOTS)
        .map(|s| {
            let row = &image[s * DESCRIPTOR_WIDTH..(s + 1) * DESCRIPTOR_WIDTH];
            let value = row[N_SLOTS..N_SLOTS + N_VALUES]
                .iter()
                .position(|&v| v == 1.0)
                .ok_or_else(|| Error::Data(format!("slot {s} has no value")))?;
            Ok((value, row[DESCRIPTOR_WIDTH - 1] == 1.0))
        })
        .collect()
}

fn encode_image(slots: &[(usize, bool)]) -> Vec<f32> {
    let mut out = vec![0.0f32; N_SLOTS * DESCRIPTOR_WIDTH];
    for (s, &(value, marked)) in slots.iter().enumerate() {
        let row = &mut out[s * DESCRIPTOR_WIDTH..(s + 1) * DESCRIPTOR_WIDTH];
        row[s] = 1.0;
        row[N_SLOTS + value] = 1.0;
        row[DESCRIPTOR_WIDTH - 1] = if marked { 1.0 } else { 0.0 };
    }
    out
}

/// The unique correct response for `(image, prompt)`.
pub fn answer(image: &[f32], prompt: &[usize]) -> Result<Vec<usize>> {
    let bad = || Error::Data(format!("malformed prompt {prompt:?}"));
    match prompt.first().copied() {
        Some(TASK_LOOKUP) => {
            let slot = prompt.get(1).and_then(|&t| t.checked_sub(SLOT_BASE)).filter(|&s| s < N_SLOTS);
            let slot = slot.ok_or_else(bad)?;
            Ok(vec![decode_image(image)?[slot].0])
        }
        Some(TASK_COUNT) => {
            let n = decode_image(image)?.iter().filter(|(_, m)| *m).count();
            Ok(vec![n])
        }
        Some(TASK_ECHO) => {
            let first = *prompt.get(1).ok_or_else(bad)?;
            if first >= N_VALUES {
                return Err(bad());
            }
            Ok(vec![first])
        }
        _ => Err(bad()),
    }
}

fn generate_item(kind: TaskKind, rng: &mut impl Rng) -> (Vec<f32>, Vec<usize>) {
    let mut slots: Vec<(usize, bool)> = (0..N_SLOTS)
        .map(|_| (rng.random_range(0..N_VALUES), rng.random_bool(0.5)))
        .collect();
    let prompt = match kind {
        TaskKind::VisualLookup => vec![TASK_LOOKUP, SLOT_BASE + rng.random_range(0..N_SLOTS)],
        TaskKind::VisualCount => {
            let count = rng.random_range(0..=N_SLOTS);
            let mut idx: Vec<usize> = (0..N_SLOTS).collect();
            idx.shuffle(rng);
            for s in &mut slots {
                s.1 = false;
            }
            for &i in &idx[..count] {
                slots[i].1 = true;
            }
            vec![TASK_COUNT]
        }
        TaskKind::PromptEcho => {
            let mut p = vec![TASK_ECHO];
            p.extend((0..ECHO_ARGS).map(|_| rng.random_range(0..N_VALUES)));
            p
        }
    };
    (encode_image(&slots), prompt)
}

/// Relative task frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub weights: BTreeMap<TaskKind, f64>,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            weights: TaskKind::ALL.into_iter().map(|k| (k, 1.0)).collect(),
        }
    }
}

impl TaskMix {
    /// Largest-remainder allocation of `n` items.
    fn allocate(&self, n: usize) -> Result<Vec<(TaskKind, usize)>> {
        let total: f64 = self.weights.values().sum();
        if self.weights.is_empty() || !(total > 0.0) || self.weights.values().any(|&w| !(w >= 0.0)) {
            return Err(Error::param("task mix needs non-negative weights with a positive sum"));
        }
        let mut alloc: Vec<(TaskKind, usize, f64)> = self
            .weights
            .iter()
            .map(|(&k, &w)| {
                let exact = w / total * n as f64;
                (k, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut left = n - alloc.iter().map(|a| a.1).sum::<usize>();
        let mut order: Vec<usize> = (0..alloc.len()).collect();
        order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
        for i in order {
            if left == 0 {
                break;
            }
            alloc[i].1 += 1;
            left -= 1;
        }
        Ok(alloc.into_iter().map(|(k, c, _)| (k, c)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub mix: TaskMix,
    pub train: Vec<Triplet>,
    pub eval: Vec<Triplet>,
}

pub const EVAL_FRACTION: f64 = 0.2;

/// Generates `n` distinct items and splits them into disjoint train and
/// eval pools (a fifth, at least one item, goes to eval).
pub fn generate_dataset(mix: &TaskMix, n: usize, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::param(format!("dataset needs at least 10 items, got {n}")));
    }
    let mut rng = rng::stream(seed, "dataset");
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(n);
    for (kind, count) in mix.allocate(n)? {
        let mut made = 0;
        let mut attempts = 0;
        while made < count {
            attempts += 1;
            if attempts > 100 * count + 1000 {
                return Err(Error::Data(format!("could not draw {count} distinct {} items", kind.label())));
            }
            let (image, prompt) = generate_item(kind, &mut rng);
            let key: (Vec<u32>, Vec<usize>) = (image.iter().map(|v| v.to_bits()).collect(), prompt.clone());
            if !seen.insert(key) {
                continue;
            }
            let response = answer(&image, &prompt)?;
            items.push((image, prompt, response));
            made += 1;
        }
    }
    items.shuffle(&mut rng);
    let n_eval = ((n as f64 * EVAL_FRACTION).round() as usize).max(1);
    let mut triplets: Vec<Triplet> = items
        .into_iter()
        .enumerate()
        .map(|(i, (image, prompt, response))| Triplet {
            id: i as u64,
            image,
            prompt,
            response,
        })
        .collect();
    let eval = triplets.split_off(n - n_eval);
    Ok(Dataset {
        seed,
        mix: mix.clone(),
        train: triplets,
        eval,
    })
}

/// Model shape used for the synthetic suite.
pub fn task_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 48,
        d_model: 32,
        n_layers: 4,
        n_heads: 4,
        head_dim: 8,
        d_ffn: 32,
        n_visual_tokens: N_SLOTS,
        d_vision: 48,
        d_descriptor: DESCRIPTOR_WIDTH,
        max_seq_len: 16,
        rms_eps: 1e-5,
        rope_base: 10_000.0,
        init_std: 0.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_sums_to_n() {
        let a = TaskMix::default().allocate(10).unwrap();
        assert_eq!(a.iter().map(|x| x.1).sum::<usize>(), 10);
    }

    #[test]
    fn image_round_trips() {
        let slots: Vec<(usize, bool)> = (0..N_SLOTS).map(|s| (s * 3 % N_VALUES, s % 2 == 0)).collect();
        assert_eq!(decode_image(&encode_image(&slots)).unwrap(), slots);
    }

    #[test]
    fn task_config_fits_vocabulary() {
        let c = task_model_config();
        c.validate().unwrap();
        assert!(c.vocab_size >= MIN_VOCAB);
    }
}
