mod common;

use common::{max_diff, oracle_forward, random_triplets};
use prunekit_core::accounting::{count_params, CountScope};
use prunekit_core::model::{names, Capture, LoraConfig, Model, ModelConfig, Scope};
use prunekit_core::Error;
use prunekit_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_layer() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        ..ModelConfig::reference()
    }
}

/// Re-draws every learned matrix at a larger scale so attention is far from
/// uniform and the oracle comparison exercises every path.
fn sharpen(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in model.tensor_names() {
        let t = model.tensor(&name).unwrap();
        let shape = t.shape().to_vec();
        let std = if name.ends_with("norm.weight") { 0.3 } else { 0.25 };
        let base = if name.ends_with("norm.weight") { 1.0 } else { 0.0 };
        let fresh = Tensor::from_fn(&shape, |_| base + std * rng.random_range(-1.7..1.7));
        model.set_tensor(&name, fresh).unwrap();
    }
}

#[test]
fn forward_matches_straight_line_oracle() {
    for sharpened in [false, true] {
        let mut m = Model::init(&two_layer(), 11).unwrap();
        if sharpened {
            sharpen(&mut m, 5);
        }
        for t in random_triplets(&m, 3, 4, 2, 9) {
            let trace = m.forward(&t, &Capture::All).unwrap();
            let (states, logits) = oracle_forward(&m, &t, &[]);
            let d = max_diff(trace.logits.data(), &logits);
            assert!(d <= 1e-5, "logit diff {d} (sharpened {sharpened})");
            for (i, s) in states.iter().enumerate() {
                let scale = s.iter().flatten().fold(1.0f64, |a, v| a.max(v.abs()));
                assert!(max_diff(trace.hidden[&i].data(), s) <= 1e-5 * scale);
            }
        }
    }
}

#[test]
fn zero_projector_gives_zero_visual_tokens() {
    let mut m = Model::init(&two_layer(), 2).unwrap();
    for name in [names::FC1_W, names::FC1_B, names::FC2_W, names::FC2_B] {
        let shape = m.tensor(name).unwrap().shape().to_vec();
        m.set_tensor(name, Tensor::zeros(&shape)).unwrap();
    }
    let t = &random_triplets(&m, 1, 3, 1, 4)[0];
    let trace = m.forward(t, &Capture::Boundaries(vec![0])).unwrap();
    let h0 = &trace.hidden[&0];
    for r in 0..m.config().n_visual_tokens {
        assert!(h0.row(r).iter().all(|&v| v == 0.0));
    }
    assert!(h0.row(m.config().n_visual_tokens).iter().any(|&v| v != 0.0));
}

#[test]
fn forward_is_deterministic() {
    let m = Model::init(&two_layer(), 3).unwrap();
    let t = &random_triplets(&m, 1, 5, 3, 1)[0];
    let a = m.forward(t, &Capture::All).unwrap();
    let b = m.forward(t, &Capture::All).unwrap();
    assert_eq!(a, b);
}

#[test]
fn perturbing_a_token_never_changes_earlier_logits() {
    let mut m = Model::init(&two_layer(), 4).unwrap();
    sharpen(&mut m, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let base = random_triplets(&m, 1, 6, 4, 2).remove(0);
    let nv = m.config().n_visual_tokens;
    let orig = m.forward(&base, &Capture::None).unwrap();
    for _ in 0..8 {
        let mut t = base.clone();
        let text_pos = rng.random_range(0..t.prompt.len() + t.response.len());
        let pos = nv + text_pos;
        if text_pos < t.prompt.len() {
            t.prompt[text_pos] = (t.prompt[text_pos] + 1) % m.config().vocab_size;
        } else {
            let j = text_pos - t.prompt.len();
            t.response[j] = (t.response[j] + 1) % m.config().vocab_size;
        }
        let pert = m.forward(&t, &Capture::None).unwrap();
        for r in 0..pos {
            assert_eq!(orig.logits.row(r), pert.logits.row(r), "row {r} changed by pos {pos}");
        }
        assert_ne!(orig.logits.row(pos), pert.logits.row(pos));
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    let c = ModelConfig::reference();
    let m = Model::init(&c, 0).unwrap();
    let (v, d, f, dv, nd) = (256u64, 64u64, 256u64, 32u64, c.d_descriptor as u64);
    let per_layer = 2 * d + 4 * d * d + 2 * d * f + f + d;
    let expected = dv * nd + (dv * d + d + d * d + d) + 4 * per_layer + (2 * v * d + d);
    assert_eq!(m.param_count() as u64, expected);
    assert_eq!(count_params(&m.shape_record(), CountScope::Total), expected);
    assert_eq!(m.decoder_param_count() as u64, 4 * per_layer);
}

#[test]
fn overlong_sequence_is_rejected() {
    let m = Model::init(&two_layer(), 0).unwrap();
    let t = &random_triplets(&m, 1, 60, 1, 0)[0];
    assert!(matches!(
        m.forward(t, &Capture::None),
        Err(Error::SequenceLength { len: 69, max: 64 })
    ));
}

#[test]
fn init_rejects_invalid_config() {
    let mut c = two_layer();
    c.head_dim = 15;
    assert!(matches!(Model::init(&c, 0), Err(Error::Parameter(_))));
}

#[test]
fn every_boundary_keeps_residual_width() {
    let m = Model::init(&ModelConfig::reference(), 1).unwrap();
    let t = &random_triplets(&m, 1, 3, 2, 3)[0];
    let trace = m.forward(t, &Capture::All).unwrap();
    assert_eq!(trace.hidden.len(), 5);
    for h in trace.hidden.values() {
        assert_eq!(h.shape(), &[13, 64]);
    }
}

#[test]
fn lora_starts_as_identity_and_merges_exactly_once() {
    let mut m = Model::init(&two_layer(), 6).unwrap();
    sharpen(&mut m, 1);
    let ts = random_triplets(&m, 2, 4, 2, 5);
    let before: Vec<_> = ts.iter().map(|t| m.forward(t, &Capture::None).unwrap()).collect();
    m.attach_lora(&LoraConfig::default(), 3).unwrap();
    for (t, b) in ts.iter().zip(&before) {
        let after = m.forward(t, &Capture::None).unwrap();
        assert!(after.logits.max_abs_diff(&b.logits) <= 1e-6);
    }
    let part = m.param_partition();
    assert!(part[&Scope::Layer(0)].contains(&"layers.0.attn.q_proj.weight.lora_b".to_string()));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for name in m.tensor_names().into_iter().filter(|n| n.ends_with("lora_b")) {
        let shape = m.tensor(&name).unwrap().shape().to_vec();
        m.set_tensor(&name, Tensor::from_fn(&shape, |_| rng.random_range(-0.2..0.2)))
            .unwrap();
    }
    let adapted: Vec<_> = ts.iter().map(|t| m.forward(t, &Capture::None).unwrap()).collect();
    assert!(adapted[0].logits.max_abs_diff(&before[0].logits) > 1e-4);
    m.merge_lora().unwrap();
    assert!(m.adapters().is_empty());
    for (t, a) in ts.iter().zip(&adapted) {
        let merged = m.forward(t, &Capture::None).unwrap();
        assert!(merged.logits.max_abs_diff(&a.logits) <= 1e-5);
    }
}
