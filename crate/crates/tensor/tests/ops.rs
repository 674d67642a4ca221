use prunekit_tensor::gradcheck;
use prunekit_tensor::precision::{self, Precision};
use prunekit_tensor::{Graph, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_scalar() {
    let mut g = Graph::new();
    let i = g.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t2(2, 2, &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let two = g.constant(t2(1, 1, &[2.0]));
    let three = g.constant(t2(1, 1, &[3.0]));
    let six = g.matmul(two, three).unwrap();
    assert_eq!(g.value(six).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let expected = naive_matmul(&a, &b);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(c).data().iter().zip(&expected) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 2]
        }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let s = g.softmax(z, 1.0, 0).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }

    let x = g.constant(Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap());
    let s = g.softmax(x, 1.0, 0).unwrap();
    assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-6);
    assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-6);

    // softmax([10, 0] / 2) = softmax([5, 0]); scalar oracle 1 / (1 + e^-5)
    let oracle_hi = 1.0 / (1.0 + (-5f64).exp());
    assert!((oracle_hi - 0.99331).abs() < 1e-5);
    let x = g.constant(Tensor::new(vec![2], vec![10.0, 0.0]).unwrap());
    let s = g.softmax(x, 2.0, 0).unwrap();
    assert!((g.value(s).data()[0] - oracle_hi).abs() < 1e-6);
    assert!((g.value(s).data()[1] - (1.0 - oracle_hi)).abs() < 1e-6);
}

#[test]
fn softmax_rejects_non_positive_temperature() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2]));
    for tau in [0.0, -1.0] {
        assert!(matches!(
            g.softmax(x, tau, 0),
            Err(TensorError::Parameter { .. })
        ));
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    // large margin on the target
    let logits = g.constant(t2(1, 3, &[0.0, 60.0, 0.0]));
    let l = g.cross_entropy(logits, &[1], &[false]).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let uniform = g.constant(Tensor::zeros(&[2, 8]));
    let l = g.cross_entropy(uniform, &[3, 7], &[false, false]).unwrap();
    assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-6);

    let err = g.cross_entropy(uniform, &[8, 0], &[false, false]).unwrap_err();
    assert!(matches!(err, TensorError::Index { index: 8, bound: 8, .. }));
}

#[test]
fn cross_entropy_matches_logsumexp_oracle_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = random(&[3, 5], &mut rng);
    let targets = [4, 0, 2];
    let ignore = [false, true, false];
    let mut oracle = 0.0;
    let mut count = 0.0;
    for r in 0..3 {
        if ignore[r] {
            continue;
        }
        let row = logits.row(r);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        oracle += lse - row[targets[r]];
        count += 1.0;
    }
    oracle /= count;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let ce = g.cross_entropy(l, &targets, &ignore).unwrap();
    assert!((g.value(ce).item() - oracle).abs() <= 1e-6);
}

#[test]
fn backward_sum_and_square() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::new();
    let w = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::zeros(&[2]), true);
    assert_eq!(
        g.backward(w).unwrap_err(),
        TensorError::NonScalarRoot(vec![2])
    );
}

#[test]
fn fan_out_accumulates_additively() {
    let mut g = Graph::new();
    let w = g.leaf(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap(), true);
    let a = g.scale(w, 3.0).unwrap();
    let b = g.add(a, w).unwrap();
    let s = g.sum(b).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        random(&[4, 6], &mut rng),
        random(&[8, 6], &mut rng),
        random(&[8], &mut rng),
        random(&[3, 8], &mut rng),
    ];
    let report = gradcheck::check(&inputs, 1e-4, |g, v| {
        let h = g.linear(v[0], v[1], Some(v[2]))?;
        let h = g.gelu(h)?;
        let o = g.linear(h, v[3], None)?;
        g.cross_entropy(o, &[0, 2, 1, 2], &[false; 4])
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

fn assert_gradcheck<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph<'_>, &[prunekit_tensor::Var]) -> prunekit_tensor::Result<prunekit_tensor::Var>,
{
    let report = gradcheck::check(&inputs, 1e-4, f).unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

/// Reduces any tensor to a scalar with a fixed random projection so every
/// output element receives a distinct upstream gradient.
fn project(g: &mut Graph<'_>, x: prunekit_tensor::Var, seed: u64) -> prunekit_tensor::Result<prunekit_tensor::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(x, w)?;
    g.sum(p)
}

#[test]
fn per_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    assert_gradcheck(vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        project(g, c, 1)
    });
    assert_gradcheck(vec![random(&[2, 3, 4], &mut rng), random(&[4, 2], &mut rng)], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        project(g, c, 2)
    });
    assert_gradcheck(vec![random(&[3, 4], &mut rng), random(&[4], &mut rng)], |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        let s = g.sub(m, v[0])?;
        project(g, s, 3)
    });
    assert_gradcheck(vec![random(&[3, 4], &mut rng)], |g, v| {
        let t = g.transpose(v[0])?;
        let r = g.reshape(t, &[2, 6])?;
        project(g, r, 4)
    });
    assert_gradcheck(vec![random(&[5, 3], &mut rng)], |g, v| {
        let e = g.embedding(v[0], &[4, 1, 4, 0])?;
        project(g, e, 5)
    });
    assert_gradcheck(vec![random(&[3, 6], &mut rng), random(&[6], &mut rng)], |g, v| {
        let n = g.rms_norm(v[0], v[1], 1e-5)?;
        project(g, n, 6)
    });
    assert_gradcheck(vec![random(&[3, 4], &mut rng)], |g, v| {
        let a = g.gelu(v[0])?;
        let b = g.exp(a)?;
        project(g, b, 7)
    });
    assert_gradcheck(vec![random(&[4, 8], &mut rng)], |g, v| {
        let r = g.rope(v[0], 2, 4, 10_000.0)?;
        project(g, r, 8)
    });
    assert_gradcheck(
        vec![random(&[5, 8], &mut rng), random(&[5, 8], &mut rng), random(&[5, 8], &mut rng)],
        |g, v| {
            let o = g.causal_attention(v[0], v[1], v[2], 2, 4)?;
            project(g, o, 9)
        },
    );
    assert_gradcheck(vec![random(&[2, 3], &mut rng), random(&[4, 3], &mut rng)], |g, v| {
        let c = g.concat(&[v[0], v[1]], 0)?;
        let s = g.slice(c, 1, 1, 2)?;
        let r = g.gather_rows(s, &[5, 0, 5])?;
        project(g, r, 10)
    });
    assert_gradcheck(vec![random(&[3, 5], &mut rng)], |g, v| {
        let s = g.softmax(v[0], 2.0, 1)?;
        let l = g.log_softmax(v[0], 0.7, 0)?;
        let a = project(g, s, 11)?;
        let b = project(g, l, 12)?;
        let a1 = g.reshape(a, &[1])?;
        let b1 = g.reshape(b, &[1])?;
        let c = g.concat(&[a1, b1], 0)?;
        g.sum(c)
    });
    assert_gradcheck(vec![random(&[3, 4], &mut rng)], |g, v| {
        let n = g.l2_norm(v[0])?;
        let m = g.mean(v[0])?;
        let n1 = g.reshape(n, &[1])?;
        let m1 = g.reshape(m, &[1])?;
        let nm = g.mul(n1, m1)?;
        g.sum(nm)
    });
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let q = g.leaf(random(&[6, 8], &mut rng), true);
        let k = g.leaf(random(&[6, 8], &mut rng), true);
        let o = g.causal_attention(q, k, q, 2, 4).unwrap();
        let s = g.sum(o).unwrap();
        g.backward(s).unwrap();
        (g.value(o).clone(), g.grad(q).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&[5, 4], &mut rng);
    let k = random(&[5, 4], &mut rng);
    let v = random(&[5, 4], &mut rng);
    let mut v2 = v.clone();
    v2.set(&[4, 0], 9.0);
    let mut k2 = k.clone();
    k2.set(&[4, 1], -9.0);
    let out = |k: &Tensor, v: &Tensor| {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.causal_attention(a, b, c, 1, 4).unwrap();
        g.value(o).clone()
    };
    let (base, moved) = (out(&k, &v), out(&k2, &v2));
    for t in 0..4 {
        assert_eq!(base.row(t), moved.row(t));
    }
    assert_ne!(base.row(4), moved.row(4));
}

#[test]
fn float32_mode_rounds_results_and_f64_mode_does_not() {
    let third = |g: &mut Graph<'_>| {
        let x = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let s = g.softmax(x, 1.0, 0).unwrap();
        g.value(s).data()[0]
    };
    let f32_value = third(&mut Graph::new());
    assert_eq!(f32_value, (1.0f64 / 3.0) as f32 as f64);
    let _m = precision::scoped(Precision::F64);
    assert_eq!(third(&mut Graph::new()), 1.0 / 3.0);
}

#[test]
fn non_finite_results_are_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1], vec![800.0]).unwrap());
    assert!(matches!(g.exp(x), Err(TensorError::NonFinite { op: "exp" })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        values in prop::collection::vec(-30.0f64..30.0, 12),
        tau in 0.05f64..10.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], values).unwrap());
        let s = g.softmax(x, tau, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(
        values in prop::collection::vec(-20.0f64..20.0, 10),
        t0 in 0usize..5,
        t1 in 0usize..5,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 5], values).unwrap());
        let l = g.cross_entropy(x, &[t0, t1], &[false, false]).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }
}
