use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::kernels;
use crate::tensor::split_shape;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `true` when `b` equals `a` or a trailing suffix of it (leading-batch
/// expansion, the only broadcast supported).
fn trailing_match(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'a> Graph<'a> {
    /// Matrix product. Supports `[m,k]·[k,n]`, `[B,m,k]·[B,k,n]` and the
    /// leading-batch expansion `[B,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, kb, n, b_batched) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [kb, n]) => (1, *m, *k, *kb, *n, false),
            ([ba, m, k], [bb, kb, n]) if ba == bb => (*ba, *m, *k, *kb, *n, true),
            ([ba, m, k], [kb, n]) => (*ba, *m, *k, *kb, *n, false),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if b_batched { bi * k * n } else { 0 };
            kernels::mm_nn_acc(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        self.push(
            "matmul",
            shape,
            out,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            &[a, b],
        )
    }

    /// `x · wᵀ (+ bias)` with `x: [rows, in]`, `w: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (rows, inp, out) = match (sx.as_slice(), sw.as_slice()) {
            ([r, i], [o, i2]) if i == i2 => (*r, *i, *o),
            _ => return Err(shape_err("linear", &sx, &sw)),
        };
        if let Some(b) = bias {
            if self.shape(b) != [out] {
                return Err(shape_err("linear", &sw, self.shape(b)));
            }
        }
        let mut y = vec![0.0; rows * out];
        kernels::mm_nt_acc(self.value(x).data(), self.value(w).data(), &mut y, rows, inp, out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..rows {
                for (v, bv) in y[r * out..(r + 1) * out].iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "linear",
            vec![rows, out],
            y,
            Op::Linear {
                x,
                w,
                bias,
                rows,
                inp,
                out,
            },
            &inputs,
        )
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !trailing_match(&sa, &sb) {
            return Err(shape_err("add", &sa, &sb));
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        self.push("add", sa, out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err("sub", &sa, &sb));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        self.push("sub", sa, out, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product; `b` may match a trailing suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !trailing_match(&sa, &sb) {
            return Err(shape_err("mul", &sa, &sb));
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * bd[i % n])
            .collect();
        self.push("mul", sa, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, factor }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = ad[r * cols + c];
            }
        }
        self.push(
            "transpose",
            vec![cols, rows],
            out,
            Op::Transpose { a, rows, cols },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).data().to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, &[a])
    }

    /// Row lookup `table[ids]` with `table: [vocab, width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, width) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(TensorError::Parameter {
                op: "embedding",
                msg: "empty id sequence".into(),
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&td[id * width..(id + 1) * width]);
        }
        self.push(
            "embedding",
            vec![ids.len(), width],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                width,
            },
            &[table],
        )
    }

    /// Row-wise RMS normalization with a learned gain: `x / rms(x) ∘ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, width) = self.value(x).dims2()?;
        if self.shape(gain) != [width] {
            return Err(shape_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let (xd, gd) = (self.value(x).data(), self.value(gain).data());
        let mut out = vec![0.0; rows * width];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * width..(r + 1) * width];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / width as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..width {
                out[r * width + j] = row[j] * inv * gd[j];
            }
        }
        self.push(
            "rms_norm",
            vec![rows, width],
            out,
            Op::RmsNorm {
                x,
                gain,
                inv_rms,
                width,
            },
            &[x, gain],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu { x }, &[x])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push("exp", shape, out, Op::Exp { a }, &[a])
    }

    /// Rotary position embedding on `x: [seq, heads * head_dim]`, rotating
    /// the two halves of every head by position-dependent angles.
    pub fn rope(&mut self, x: Var, heads: usize, head_dim: usize, base: f64) -> Result<Var> {
        let (seq, width) = self.value(x).dims2()?;
        if width != heads * head_dim || head_dim % 2 != 0 {
            return Err(shape_err("rope", self.shape(x), &[heads, head_dim]));
        }
        let angles = kernels::rope_angles(seq, head_dim, base);
        let mut out = self.value(x).data().to_vec();
        kernels::rope_apply(&mut out, seq, heads, head_dim, &angles, false);
        self.push(
            "rope",
            vec![seq, width],
            out,
            Op::Rope {
                x,
                seq,
                heads,
                head_dim,
                angles,
            },
            &[x],
        )
    }

    /// Causal scaled dot-product attention over `heads` contiguous column
    /// blocks of `q`, `k`, `v` (each `[seq, heads * head_dim]`). Position `t`
    /// attends to positions `0..=t` only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let (seq, width) = self.value(q).dims2()?;
        if width != heads * head_dim {
            return Err(shape_err("causal_attention", &sq, &[heads, head_dim]));
        }
        for other in [k, v] {
            if self.shape(other) != sq.as_slice() {
                return Err(shape_err("causal_attention", &sq, self.shape(other)));
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            seq,
            heads,
            head_dim,
        );
        self.push(
            "causal_attention",
            sq,
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                head_dim,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner) = split_shape(&shape, axis)?;
        if len == 0 || start + len > extent {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                bound: extent,
            });
        }
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&ad[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", out_shape, out, Op::Slice { a, axis, start }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(TensorError::Parameter {
            op: "concat",
            msg: "no inputs".into(),
        })?)
        .to_vec();
        split_shape(&first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Selects rows of a rank-2 tensor (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, width) = self.value(a).dims2()?;
        if rows.is_empty() {
            return Err(TensorError::Parameter {
                op: "gather_rows",
                msg: "empty row selection".into(),
            });
        }
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(&ad[r * width..(r + 1) * width]);
        }
        self.push(
            "gather_rows",
            vec![rows.len(), width],
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    /// `softmax(x / temperature)` along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, temperature: f64, axis: usize) -> Result<Var> {
        check_temperature("softmax", temperature)?;
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner) = split_shape(&shape, axis)?;
        let mut out = vec![0.0; self.value(a).numel()];
        kernels::softmax_axis(self.value(a).data(), &mut out, outer, extent, inner, temperature);
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax {
                a,
                temperature,
                axis,
            },
            &[a],
        )
    }

    /// `log softmax(x / temperature)` along `axis`.
    pub fn log_softmax(&mut self, a: Var, temperature: f64, axis: usize) -> Result<Var> {
        check_temperature("log_softmax", temperature)?;
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner) = split_shape(&shape, axis)?;
        let ad = self.value(a).data();
        let lse = kernels::logsumexp_axis(ad, outer, extent, inner, temperature);
        let mut out = vec![0.0; ad.len()];
        for o in 0..outer {
            for e in 0..extent {
                for i in 0..inner {
                    let idx = (o * extent + e) * inner + i;
                    out[idx] = ad[idx] / temperature - lse[o * inner + i];
                }
            }
        }
        self.push(
            "log_softmax",
            shape,
            out,
            Op::LogSoftmax {
                a,
                temperature,
                axis,
            },
            &[a],
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [rows, vocab]`, over rows where `ignore[r]` is false.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows || ignore.len() != rows {
            return Err(shape_err("cross_entropy", &[rows, vocab], &[targets.len()]));
        }
        let active: Vec<bool> = ignore.iter().map(|i| !i).collect();
        let count = active.iter().filter(|a| **a).count();
        if count == 0 {
            return Err(TensorError::Parameter {
                op: "cross_entropy",
                msg: "every position is masked".into(),
            });
        }
        let ld = self.value(logits).data();
        let mut total = 0.0;
        for (r, (&t, &on)) in targets.iter().zip(&active).enumerate() {
            if !on {
                continue;
            }
            if t >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        self.push(
            "cross_entropy",
            vec![],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", vec![], vec![m], Op::Mean { a }, &[a])
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push("l2_norm", vec![], vec![n], Op::L2Norm { a }, &[a])
    }
}

fn check_temperature(op: &'static str, temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Parameter {
            op,
            msg: format!("temperature must be positive, got {temperature}"),
        })
    }
}
