mod common;

use common::{oracle_forward, random_triplets};
use prunekit_core::importance::{
    block_influence, block_influence_from_states, build_dependency_groups,
    taylor_group_importance, CalibrationSet, GroupKind, PruneGroup,
};
use prunekit_core::model::{names, Model, ModelConfig, Triplet};
use prunekit_core::recovery::losses::sft_loss;
use prunekit_tensor::precision::{self, Precision};
use prunekit_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        head_dim: 8,
        d_ffn: 8,
        n_visual_tokens: 2,
        d_vision: 8,
        d_descriptor: 4,
        max_seq_len: 16,
        ..ModelConfig::reference()
    }
}

/// Redraws learned matrices at a larger scale so the loss surface is not
/// trivially linear.
fn sharpen(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in model.tensor_names() {
        if name.ends_with("norm.weight") {
            continue;
        }
        let shape = model.tensor(&name).unwrap().shape().to_vec();
        let t = Tensor::from_fn(&shape, |_| scale * rng.random_range(-1.0..1.0));
        model.set_tensor(&name, t).unwrap();
    }
}

fn zero_branch(model: &mut Model, layer: usize) {
    for s in [names::O, names::DOWN_W, names::DOWN_B] {
        let n = names::layer(layer, s);
        let shape = model.tensor(&n).unwrap().shape().to_vec();
        model.set_tensor(&n, Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn pass_through_layer_scores_zero() {
    let mut m = Model::init(&ModelConfig::reference(), 1).unwrap();
    zero_branch(&mut m, 2);
    let calib = CalibrationSet {
        triplets: random_triplets(&m, 3, 4, 2, 1),
    };
    let r = block_influence(&m, &calib).unwrap();
    assert!(r.scores[2].abs() <= 1e-6, "{}", r.scores[2]);
    assert_eq!(r.ranking[0], 2);
    assert!(r.scores.iter().all(|&s| (0.0..=2.0).contains(&s)));
}

#[test]
fn sign_flip_scores_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = Tensor::from_fn(&[5, 6], |_| rng.random_range(-1.0..1.0));
    let mut neg = h.clone();
    neg.scale_in_place(-1.0);
    let r = block_influence_from_states(&[vec![h.clone(), neg, h]]).unwrap();
    assert!((r.scores[0] - 2.0).abs() <= 1e-6);
    assert!((r.scores[1] - 2.0).abs() <= 1e-6);
}

#[test]
fn zero_rows_are_excluded_and_counted() {
    let mut a = Tensor::ones(&[3, 2]);
    a.set(&[1, 0], 0.0);
    a.set(&[1, 1], 0.0);
    let r = block_influence_from_states(&[vec![a.clone(), a]]).unwrap();
    assert_eq!(r.excluded_rows, 1);
    assert!(r.scores[0].abs() < 1e-12);
}

#[test]
fn block_influence_matches_per_token_oracle() {
    let _p = precision::scoped(Precision::F64);
    let mut m = Model::init(&ModelConfig::reference(), 7).unwrap();
    sharpen(&mut m, 0.2, 3);
    let ts = random_triplets(&m, 2, 5, 3, 8);
    let report = block_influence(&m, &CalibrationSet { triplets: ts.clone() }).unwrap();
    let mut sums = vec![0.0; 4];
    let mut count = 0usize;
    for t in &ts {
        let (states, _) = oracle_forward(&m, t, &[]);
        for tok in 0..states[0].len() {
            for (i, s) in sums.iter_mut().enumerate() {
                let a = &states[i][tok];
                let b = &states[i + 1][tok];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                *s += dot / (na * nb);
            }
            count += 1;
        }
    }
    for i in 0..4 {
        let oracle = 1.0 - sums[i] / count as f64;
        assert!((report.scores[i] - oracle).abs() <= 1e-6, "layer {i}: {} vs {oracle}", report.scores[i]);
    }
    assert_eq!(report.tokens_used, count);
}

#[test]
fn group_counts_and_structure() {
    let c = ModelConfig {
        n_layers: 2,
        ..ModelConfig::reference()
    };
    let m = Model::init(&c, 0).unwrap();
    let groups = build_dependency_groups(&m);
    assert_eq!(groups.len(), 2 * (4 + 256));
    let head = &groups[0];
    assert_eq!(head.kind, GroupKind::AttentionHead);
    let rows: usize = head.members.iter().filter(|s| s.axis == 0).map(|s| s.len).sum();
    let cols: usize = head.members.iter().filter(|s| s.axis == 1).map(|s| s.len).sum();
    assert_eq!((rows, cols), (3 * 16, 16));
    assert_eq!(head.param_count(&m), 4 * 16 * 64);
    assert!(groups.iter().enumerate().all(|(i, g)| g.id == i));
}

#[test]
fn every_inner_index_is_covered_once() {
    let m = Model::init(&ModelConfig::reference(), 0).unwrap();
    let groups = build_dependency_groups(&m);
    for name in m.params().keys() {
        let shape = m.params()[name].shape();
        let mut hits = vec![0u32; shape.iter().product()];
        for s in groups.iter().flat_map(|g| &g.members).filter(|s| &s.param == name) {
            for i in s.flat_indices(shape) {
                hits[i] += 1;
            }
        }
        let prunable = [names::Q, names::K, names::V, names::O, names::UP_W, names::UP_B, names::DOWN_W]
            .iter()
            .any(|s| name.ends_with(s));
        if prunable {
            assert!(hits.iter().all(|&h| h == 1), "{name}");
        } else {
            assert!(hits.iter().all(|&h| h == 0), "{name}");
        }
    }
}

fn zero_group(model: &mut Model, g: &PruneGroup) {
    for s in &g.members {
        let mut t = model.tensor(&s.param).unwrap().clone();
        t.zero_range(s.axis, s.start, s.len).unwrap();
        model.set_tensor(&s.param, t).unwrap();
    }
}

#[test]
fn zero_weight_group_has_zero_importance() {
    let mut m = Model::init(&tiny_config(), 2).unwrap();
    sharpen(&mut m, 0.3, 1);
    let groups = build_dependency_groups(&m);
    zero_group(&mut m, &groups[1]);
    zero_group(&mut m, &groups[5]);
    let calib = CalibrationSet {
        triplets: random_triplets(&m, 3, 3, 1, 2),
    };
    let scored = taylor_group_importance(&m, &groups, &calib).unwrap();
    assert_eq!(scored[1].importance, 0.0);
    assert_eq!(scored[5].importance, 0.0);
    assert!(scored[0].importance > 0.0);
}

#[test]
fn duplicating_the_calibration_set_keeps_importances() {
    let mut m = Model::init(&tiny_config(), 3).unwrap();
    sharpen(&mut m, 0.3, 2);
    let groups = build_dependency_groups(&m);
    let ts = random_triplets(&m, 3, 3, 2, 5);
    let once = taylor_group_importance(&m, &groups, &CalibrationSet { triplets: ts.clone() }).unwrap();
    let doubled: Vec<Triplet> = ts.iter().flat_map(|t| [t.clone(), t.clone()]).collect();
    let twice = taylor_group_importance(&m, &groups, &CalibrationSet { triplets: doubled }).unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert!((a.importance - b.importance).abs() <= 1e-6 * a.importance.max(1.0));
    }
}

fn mean_loss(model: &Model, ts: &[Triplet]) -> Vec<f64> {
    ts.iter().map(|t| sft_loss(model, t).unwrap()).collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn taylor_ranks_agree_with_leave_one_group_out() {
    let _p = precision::scoped(Precision::F64);
    let mut m = Model::init(&tiny_config(), 5).unwrap();
    sharpen(&mut m, 0.25, 9);
    let groups = build_dependency_groups(&m);
    let ts = random_triplets(&m, 10, 3, 2, 6);
    let scored = taylor_group_importance(&m, &groups, &CalibrationSet { triplets: ts.clone() }).unwrap();
    let base = mean_loss(&m, &ts);
    let mut exact = Vec::new();
    for g in &groups {
        let mut z = m.clone();
        zero_group(&mut z, g);
        let after = mean_loss(&z, &ts);
        let d: f64 = after.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() / ts.len() as f64;
        exact.push(d);
    }
    let imp: Vec<f64> = scored.iter().map(|g| g.importance).collect();
    let rho = spearman(&imp, &exact);
    assert!(rho >= 0.7, "spearman {rho}: {imp:?} vs {exact:?}");
}

#[test]
fn group_scaling_matches_signed_first_order_term() {
    let _p = precision::scoped(Precision::F64);
    let mut m = Model::init(&tiny_config(), 8).unwrap();
    sharpen(&mut m, 0.25, 4);
    let groups = build_dependency_groups(&m);
    let ts = random_triplets(&m, 3, 3, 2, 1);
    let base: f64 = mean_loss(&m, &ts).iter().sum::<f64>() / 3.0;
    // Signed Σ g·w per group, from a backward pass.
    let calib = CalibrationSet { triplets: ts.clone() };
    let abs = taylor_group_importance(&m, &groups, &calib).unwrap();
    for (g, a) in groups.iter().zip(&abs).take(4) {
        let eps = 1e-5;
        let mut scaled = m.clone();
        for s in &g.members {
            let mut t = scaled.tensor(&s.param).unwrap().clone();
            let shape = t.shape().to_vec();
            for i in s.flat_indices(&shape) {
                t.data_mut()[i] *= 1.0 - eps;
            }
            scaled.set_tensor(&s.param, t).unwrap();
        }
        let after: f64 = mean_loss(&scaled, &ts).iter().sum::<f64>() / 3.0;
        let signed = (after - base) / eps;
        // |Σ g·w| never exceeds Σ|g·w|.
        assert!(signed.abs() <= a.importance * (1.0 + 1e-3) + 1e-9);
    }
}
