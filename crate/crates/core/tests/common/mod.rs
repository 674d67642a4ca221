//! Test-side helpers: an independent plain-loop forward pass and random
//! triplet generation.
#![allow(dead_code)]

use prunekit_core::model::{names, Model, Triplet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_triplets(model: &Model, n: usize, prompt: usize, response: usize, seed: u64) -> Vec<Triplet> {
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Triplet {
            id: i as u64,
            image: (0..c.n_visual_tokens * c.d_descriptor)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
            prompt: (0..prompt).map(|_| rng.random_range(0..c.vocab_size)).collect(),
            response: (0..response).map(|_| rng.random_range(0..c.vocab_size)).collect(),
        })
        .collect()
}

type Mat = Vec<Vec<f64>>;

fn w(model: &Model, name: &str) -> Mat {
    let t = model.tensor(name).unwrap();
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn v(model: &Model, name: &str) -> Vec<f64> {
    model.tensor(name).unwrap().data().to_vec()
}

/// `x · Wᵀ + b`
fn lin(x: &Mat, wt: &Mat, b: Option<&[f64]>) -> Mat {
    x.iter()
        .map(|row| {
            wt.iter()
                .enumerate()
                .map(|(o, wr)| {
                    let mut s = 0.0;
                    for k in 0..row.len() {
                        s += row[k] * wr[k];
                    }
                    s + b.map_or(0.0, |b| b[o])
                })
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn rms(x: &Mat, g: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter().zip(g).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

fn rope(x: &mut Mat, heads: usize, hd: usize, base: f64) {
    for (t, row) in x.iter_mut().enumerate() {
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = t as f64 / base.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (row[h * hd + i], row[h * hd + i + hd / 2]);
                row[h * hd + i] = a * theta.cos() - b * theta.sin();
                row[h * hd + i + hd / 2] = a * theta.sin() + b * theta.cos();
            }
        }
    }
}

fn add(a: &mut Mat, b: &Mat) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

/// Straight-line forward returning `(boundary states, logits)`. Layers in
/// `skip` contribute nothing (their residual branch is dropped).
pub fn oracle_forward(model: &Model, t: &Triplet, skip: &[usize]) -> (Vec<Mat>, Mat) {
    let c = model.config();
    let img: Mat = (0..c.n_visual_tokens)
        .map(|r| {
            t.image[r * c.d_descriptor..(r + 1) * c.d_descriptor]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let feats = lin(&img, &w(model, names::VISION), None);
    let h: Mat = lin(&feats, &w(model, names::FC1_W), Some(&v(model, names::FC1_B)))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let mut x = lin(&h, &w(model, names::FC2_W), Some(&v(model, names::FC2_B)));
    let emb = w(model, names::EMBED);
    for &id in t.prompt.iter().chain(&t.response) {
        x.push(emb[id].clone());
    }
    let seq = x.len();
    let hd = c.head_dim;
    let mut states = vec![x.clone()];
    for (i, shape) in model.layers().iter().enumerate() {
        if skip.contains(&i) {
            states.push(x.clone());
            continue;
        }
        let p = |s: &str| names::layer(i, s);
        let a = rms(&x, &v(model, &p(names::ATTN_NORM)), c.rms_eps);
        let mut q = lin(&a, &w(model, &p(names::Q)), None);
        let mut k = lin(&a, &w(model, &p(names::K)), None);
        let vv = lin(&a, &w(model, &p(names::V)), None);
        rope(&mut q, shape.n_heads, hd, c.rope_base);
        rope(&mut k, shape.n_heads, hd, c.rope_base);
        let mut att = vec![vec![0.0; shape.n_heads * hd]; seq];
        for h in 0..shape.n_heads {
            for ti in 0..seq {
                let scores: Vec<f64> = (0..=ti)
                    .map(|s| {
                        (0..hd).map(|e| q[ti][h * hd + e] * k[s][h * hd + e]).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let pr = (sc - m).exp() / z;
                    for e in 0..hd {
                        att[ti][h * hd + e] += pr * vv[s][h * hd + e];
                    }
                }
            }
        }
        let o = lin(&att, &w(model, &p(names::O)), None);
        add(&mut x, &o);
        let m = rms(&x, &v(model, &p(names::MLP_NORM)), c.rms_eps);
        let up: Mat = lin(&m, &w(model, &p(names::UP_W)), Some(&v(model, &p(names::UP_B))))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let down = lin(&up, &w(model, &p(names::DOWN_W)), Some(&v(model, &p(names::DOWN_B))));
        add(&mut x, &down);
        states.push(x.clone());
    }
    let f = rms(&x, &v(model, names::FINAL_NORM), c.rms_eps);
    let logits = lin(&f, &w(model, names::HEAD), None);
    (states, logits)
}

pub fn max_diff(a: &[f64], b: &Mat) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    assert_eq!(a.len(), flat.len());
    a.iter().zip(&flat).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
