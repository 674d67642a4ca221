use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::precision;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Ids grow in creation order, which is
/// also the topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        width: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
        width: usize,
    },
    Gelu {
        x: Var,
    },
    Exp {
        a: Var,
    },
    Rope {
        x: Var,
        seq: usize,
        heads: usize,
        head_dim: usize,
        angles: Vec<(f64, f64)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        head_dim: usize,
        probs: Vec<f64>,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Softmax {
        a: Var,
        temperature: f64,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
        temperature: f64,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        count: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    L2Norm {
        a: Var,
    },
}

pub(crate) struct Node<'a> {
    pub(crate) value: Cow<'a, Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor>,
}

/// An operation record. Leaves may borrow their values (model parameters)
/// for the lifetime `'a`; every derived value is owned.
///
/// A graph is single-threaded; independent graphs may live on separate
/// threads.
#[derive(Default)]
pub struct Graph<'a> {
    pub(crate) nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Registers a borrowed leaf without copying it.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        precision::round_slice(&mut data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(Tensor::from_parts(shape, data)),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar root. Every node that requires a gradient
    /// and is reachable from `loss` receives `d loss / d node`, added to any
    /// gradient already stored there. Nodes are visited once each, in
    /// descending id order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            precision::round_slice(&mut g);
            self.propagate(id, &g, &mut grads)?;
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                        *e = precision::round(*e + v);
                    }
                }
                None => {
                    node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // Lazily allocates the input's gradient buffer and hands it to `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let input = &nodes[v.0];
            if !input.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; input.value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |da| {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        kernels::mm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[boff..boff + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(b, &mut |db| {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        kernels::mm_tn_acc(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            &Op::Linear {
                x,
                w,
                bias,
                rows,
                inp,
                out,
            } => {
                let (xd, wd) = (val(x), val(w));
                acc(x, &mut |dx| kernels::mm_nn_acc(g, wd, dx, rows, out, inp));
                acc(w, &mut |dw| kernels::mm_tn_acc(g, xd, dw, rows, out, inp));
                if let Some(b) = bias {
                    acc(b, &mut |db| {
                        for r in 0..rows {
                            for (d, gv) in db.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| fold_leading(db, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (val(a), val(b));
                let bl = bd.len();
                acc(a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bd[i % bl];
                    }
                });
                acc(b, &mut |db| {
                    for (i, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                        db[i % bl] += gv * av;
                    }
                });
            }
            &Op::Scale { a, factor } => {
                acc(a, &mut |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += factor * gv;
                    }
                });
            }
            &Op::Transpose { a, rows, cols } => {
                acc(a, &mut |da| {
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            &Op::Reshape { a } => acc(a, &mut |da| add_into(da, g)),
            Op::Embedding { table, ids, width } => {
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * width..(r + 1) * width];
                        add_into(&mut dt[id * width..(id + 1) * width], src);
                    }
                });
            }
            Op::RmsNorm {
                x,
                gain,
                inv_rms,
                width,
            } => {
                let (xd, gd) = (val(*x), val(*gain));
                let width = *width;
                acc(*x, &mut |dx| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xd[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let proj: f64 = (0..width).map(|j| gr[j] * gd[j] * xr[j]).sum();
                        let coef = inv * inv * inv * proj / width as f64;
                        for j in 0..width {
                            dx[r * width + j] += inv * gd[j] * gr[j] - coef * xr[j];
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..width {
                            dg[j] += g[r * width + j] * xd[r * width + j] * inv;
                        }
                    }
                });
            }
            &Op::Gelu { x } => {
                let xd = val(x);
                acc(x, &mut |dx| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * kernels::gelu_grad(xd[i]);
                    }
                });
            }
            &Op::Exp { a } => {
                let out = node.value.data();
                acc(a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * out[i];
                    }
                });
            }
            Op::Rope {
                x,
                seq,
                heads,
                head_dim,
                angles,
            } => {
                let mut back = g.to_vec();
                kernels::rope_apply(&mut back, *seq, *heads, *head_dim, angles, true);
                acc(*x, &mut |dx| add_into(dx, &back));
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                head_dim,
                probs,
            } => {
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let numel = qd.len();
                let mut dq = vec![0.0; numel];
                let mut dk = vec![0.0; numel];
                let mut dv = vec![0.0; numel];
                kernels::attention_backward(
                    qd, kd, vd, probs, g, *seq, *heads, *head_dim, &mut dq, &mut dk, &mut dv,
                );
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
            }
            &Op::Slice { a, axis, start } => {
                let in_shape = nodes[a.0].value.shape();
                let (outer, extent, inner) = crate::tensor::split_shape(in_shape, axis)?;
                let len = node.value.shape()[axis];
                acc(a, &mut |da| {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst = (o * extent + start) * inner;
                        add_into(&mut da[dst..dst + len * inner], src);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = crate::tensor::split_shape(out_shape, *axis)?;
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |dp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut dp[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::GatherRows { a, rows } => {
                let width = node.value.shape()[1];
                acc(*a, &mut |da| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut da[r * width..(r + 1) * width],
                            &g[i * width..(i + 1) * width],
                        );
                    }
                });
            }
            &Op::Softmax {
                a,
                temperature,
                axis,
            } => {
                let y = node.value.data();
                let (outer, extent, inner) =
                    crate::tensor::split_shape(node.value.shape(), axis)?;
                acc(a, &mut |da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |e: usize| (o * extent + e) * inner + i;
                            let s: f64 = (0..extent).map(|e| g[idx(e)] * y[idx(e)]).sum();
                            for e in 0..extent {
                                da[idx(e)] += y[idx(e)] * (g[idx(e)] - s) / temperature;
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax {
                a,
                temperature,
                axis,
            } => {
                let y = node.value.data();
                let (outer, extent, inner) =
                    crate::tensor::split_shape(node.value.shape(), axis)?;
                acc(a, &mut |da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |e: usize| (o * extent + e) * inner + i;
                            let s: f64 = (0..extent).map(|e| g[idx(e)]).sum();
                            for e in 0..extent {
                                da[idx(e)] += (g[idx(e)] - y[idx(e)].exp() * s) / temperature;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                count,
            } => {
                let ld = val(*logits);
                let vocab = nodes[logits.0].value.shape()[1];
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |dl| {
                    for (r, (&t, &on)) in targets.iter().zip(active).enumerate() {
                        if !on {
                            continue;
                        }
                        let row = &ld[r * vocab..(r + 1) * vocab];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (j, &lv) in row.iter().enumerate() {
                            let p = (lv - max).exp() / z;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * vocab + j] += scale * (p - onehot);
                        }
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean { a } => {
                let n = nodes[a.0].value.numel() as f64;
                acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            &Op::L2Norm { a } => {
                let ad = val(a);
                let norm = node.value.item();
                acc(a, &mut |da| {
                    if norm > 0.0 {
                        for (d, &av) in da.iter_mut().zip(ad) {
                            *d += g[0] * av / norm;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adds `src` into `dst`, folding leading-batch repeats of `dst`'s shape.
fn fold_leading(dst: &mut [f64], src: &[f64]) {
    let n = dst.len();
    for (i, s) in src.iter().enumerate() {
        dst[i % n] += s;
    }
}
