//! Plain-loop kernels shared by forward and backward passes.
//!
//! All matrices are row-major slices. The `*_acc` kernels accumulate into
//! `out` so that backward passes can add contributions in place.

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Rotation angles for rotary embeddings, `[t][i]` for `i < head_dim / 2`.
pub(crate) fn rope_angles(seq: usize, head_dim: usize, base: f64) -> Vec<(f64, f64)> {
    let half = head_dim / 2;
    let mut out = Vec::with_capacity(seq * half);
    for t in 0..seq {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = t as f64 * freq;
            out.push((angle.cos(), angle.sin()));
        }
    }
    out
}

/// Applies (or with `inverse`, undoes) the half-split rotary rotation in
/// place on `x: [seq, heads * head_dim]`.
pub(crate) fn rope_apply(
    x: &mut [f64],
    seq: usize,
    heads: usize,
    head_dim: usize,
    angles: &[(f64, f64)],
    inverse: bool,
) {
    let half = head_dim / 2;
    let width = heads * head_dim;
    for t in 0..seq {
        for h in 0..heads {
            let base = t * width + h * head_dim;
            for i in 0..half {
                let (c, s) = angles[t * half + i];
                let s = if inverse { -s } else { s };
                let x1 = x[base + i];
                let x2 = x[base + half + i];
                x[base + i] = x1 * c - x2 * s;
                x[base + half + i] = x1 * s + x2 * c;
            }
        }
    }
}

/// Causal multi-head attention forward.
///
/// Returns the output `[seq, heads * head_dim]` and the attention
/// probabilities `[heads, seq, seq]` (upper triangle zero).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    seq: usize,
    heads: usize,
    head_dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    let width = heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; seq * width];
    let mut probs = vec![0.0; heads * seq * seq];
    for h in 0..heads {
        let off = h * head_dim;
        for t in 0..seq {
            let qrow = &q[t * width + off..t * width + off + head_dim];
            let prow = &mut probs[(h * seq + t) * seq..(h * seq + t + 1) * seq];
            let mut max = f64::NEG_INFINITY;
            for s in 0..=t {
                let krow = &k[s * width + off..s * width + off + head_dim];
                let score = dot(qrow, krow) * scale;
                prow[s] = score;
                max = max.max(score);
            }
            let mut z = 0.0;
            for p in prow.iter_mut().take(t + 1) {
                *p = (*p - max).exp();
                z += *p;
            }
            for p in prow.iter_mut().take(t + 1) {
                *p /= z;
            }
            let orow = &mut out[t * width + off..t * width + off + head_dim];
            for (s, &p) in prow.iter().enumerate().take(t + 1) {
                let vrow = &v[s * width + off..s * width + off + head_dim];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Causal attention backward: accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    seq: usize,
    heads: usize,
    head_dim: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let width = heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dp = vec![0.0; seq];
    for h in 0..heads {
        let off = h * head_dim;
        for t in 0..seq {
            let prow = &probs[(h * seq + t) * seq..(h * seq + t + 1) * seq];
            let dorow = &dout[t * width + off..t * width + off + head_dim];
            let mut weighted = 0.0;
            for s in 0..=t {
                let vrow = &v[s * width + off..s * width + off + head_dim];
                dp[s] = dot(dorow, vrow);
                weighted += dp[s] * prow[s];
                let dvrow = &mut dv[s * width + off..s * width + off + head_dim];
                for (d, &g) in dvrow.iter_mut().zip(dorow) {
                    *d += prow[s] * g;
                }
            }
            for s in 0..=t {
                let ds = prow[s] * (dp[s] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let krow = &k[s * width + off..s * width + off + head_dim];
                let qrow = &q[t * width + off..t * width + off + head_dim];
                let dqrow = &mut dq[t * width + off..t * width + off + head_dim];
                for (d, &kv) in dqrow.iter_mut().zip(krow) {
                    *d += ds * kv;
                }
                let dkrow = &mut dk[s * width + off..s * width + off + head_dim];
                for (d, &qv) in dkrow.iter_mut().zip(qrow) {
                    *d += ds * qv;
                }
            }
        }
    }
}

/// Row-wise softmax of `x / temperature` over an `(outer, extent, inner)`
/// decomposition, written into `out`.
pub(crate) fn softmax_axis(
    x: &[f64],
    out: &mut [f64],
    outer: usize,
    extent: usize,
    inner: usize,
    temperature: f64,
) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * extent + e) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for e in 0..extent {
                max = max.max(x[idx(e)] / temperature);
            }
            let mut z = 0.0;
            for e in 0..extent {
                let v = (x[idx(e)] / temperature - max).exp();
                out[idx(e)] = v;
                z += v;
            }
            for e in 0..extent {
                out[idx(e)] /= z;
            }
        }
    }
}

/// Log-sum-exp of `x / temperature` along each lane; returns one value per
/// `(outer, inner)` lane.
pub(crate) fn logsumexp_axis(
    x: &[f64],
    outer: usize,
    extent: usize,
    inner: usize,
    temperature: f64,
) -> Vec<f64> {
    let mut lse = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * extent + e) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for e in 0..extent {
                max = max.max(x[idx(e)] / temperature);
            }
            let z: f64 = (0..extent)
                .map(|e| (x[idx(e)] / temperature - max).exp())
                .sum();
            lse.push(max + z.ln());
        }
    }
    lse
}
