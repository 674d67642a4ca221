use std::collections::{BTreeMap, HashMap};

use prunekit_tensor::{Graph, Tensor, Var};

use super::{lora, names, Model, TokenLayout, Triplet};
use crate::error::{Error, Result};

/// Which residual-stream boundaries to copy out of a forward pass.
///
/// Boundary `0` is the decoder input; boundary `i` is the output of layer
/// `i` (1-based), so a model with `M` layers has boundaries `0..=M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Capture {
    None,
    All,
    Boundaries(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub hidden: BTreeMap<usize, Tensor>,
    /// Output of the final norm, `[T, d]`.
    pub final_state: Tensor,
    /// `[T, V]`
    pub logits: Tensor,
    pub layout: TokenLayout,
}

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphTrace {
    /// All `M + 1` boundary states.
    pub hidden: Vec<Var>,
    pub final_state: Var,
    pub logits: Var,
    pub layout: TokenLayout,
}

/// Parameter name to graph leaf.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl Model {
    /// Registers every tensor as a borrowed leaf; `trainable` selects which
    /// ones receive gradients. The vision stub never does.
    pub fn bind<'m>(&'m self, g: &mut Graph<'m>, trainable: &dyn Fn(&str) -> bool) -> Binding {
        let mut vars = HashMap::new();
        for (name, t) in &self.params {
            let grad = name != names::VISION && trainable(name);
            vars.insert(name.clone(), g.param(t, grad));
        }
        for (target, ad) in &self.lora {
            for (which, t) in [('a', &ad.a), ('b', &ad.b)] {
                let name = lora::factor_name(target, which);
                let grad = trainable(&name);
                vars.insert(name, g.param(t, grad));
            }
        }
        Binding { vars }
    }

    /// Validates a triplet against this model and returns its layout.
    pub fn check_triplet(&self, t: &Triplet) -> Result<TokenLayout> {
        let c = &self.config;
        let layout = t.layout(c.n_visual_tokens);
        if layout.len() > c.max_seq_len {
            return Err(Error::SequenceLength {
                len: layout.len(),
                max: c.max_seq_len,
            });
        }
        if layout.n_prompt + layout.n_response == 0 {
            return Err(Error::Data("triplet has no text tokens".into()));
        }
        if t.image.len() != c.n_visual_tokens * c.d_descriptor {
            return Err(Error::Data(format!(
                "image descriptor has {} values, expected {}",
                t.image.len(),
                c.n_visual_tokens * c.d_descriptor
            )));
        }
        if let Some(&bad) = t.text().iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of vocabulary {}",
                c.vocab_size
            )));
        }
        Ok(layout)
    }

    fn proj(&self, g: &mut Graph<'_>, b: &Binding, x: Var, name: &str) -> Result<Var> {
        let y = g.linear(x, b.var(name)?, None)?;
        let Some(ad) = self.lora.get(name) else {
            return Ok(y);
        };
        let a = b.var(&lora::factor_name(name, 'a'))?;
        let bb = b.var(&lora::factor_name(name, 'b'))?;
        let low = g.linear(x, a, None)?;
        let up = g.linear(low, bb, None)?;
        let up = g.scale(up, ad.scaling)?;
        Ok(g.add(y, up)?)
    }

    /// Builds the forward pass for `triplet` on `g`, teacher-forced over
    /// `[visual | prompt | response]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        b: &Binding,
        triplet: &Triplet,
    ) -> Result<GraphTrace> {
        let layout = self.check_triplet(triplet)?;
        let c = &self.config;
        let image = g.constant(Tensor::from_f32(
            vec![c.n_visual_tokens, c.d_descriptor],
            &triplet.image,
        )?);
        let feats = g.linear(image, b.var(names::VISION)?, None)?;
        let h = g.linear(feats, b.var(names::FC1_W)?, Some(b.var(names::FC1_B)?))?;
        let h = g.gelu(h)?;
        let visual = g.linear(h, b.var(names::FC2_W)?, Some(b.var(names::FC2_B)?))?;
        let text = g.embedding(b.var(names::EMBED)?, &triplet.text())?;
        let mut x = g.concat(&[visual, text], 0)?;

        let mut hidden = vec![x];
        for (i, shape) in self.layers.iter().enumerate() {
            let p = |s: &str| names::layer(i, s);
            let a = g.rms_norm(x, b.var(&p(names::ATTN_NORM))?, c.rms_eps)?;
            let q = self.proj(g, b, a, &p(names::Q))?;
            let k = self.proj(g, b, a, &p(names::K))?;
            let v = self.proj(g, b, a, &p(names::V))?;
            let q = g.rope(q, shape.n_heads, c.head_dim, c.rope_base)?;
            let k = g.rope(k, shape.n_heads, c.head_dim, c.rope_base)?;
            let att = g.causal_attention(q, k, v, shape.n_heads, c.head_dim)?;
            let o = self.proj(g, b, att, &p(names::O))?;
            x = g.add(x, o)?;

            let m = g.rms_norm(x, b.var(&p(names::MLP_NORM))?, c.rms_eps)?;
            let up = g.linear(m, b.var(&p(names::UP_W))?, Some(b.var(&p(names::UP_B))?))?;
            let up = g.gelu(up)?;
            let down = g.linear(up, b.var(&p(names::DOWN_W))?, Some(b.var(&p(names::DOWN_B))?))?;
            x = g.add(x, down)?;
            hidden.push(x);
        }
        let final_state = g.rms_norm(x, b.var(names::FINAL_NORM)?, c.rms_eps)?;
        let logits = g.linear(final_state, b.var(names::HEAD)?, None)?;
        Ok(GraphTrace {
            hidden,
            final_state,
            logits,
            layout,
        })
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, triplet: &Triplet, capture: &Capture) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &|_| false);
        let gt = self.forward_graph(&mut g, &b, triplet)?;
        let boundaries: Vec<usize> = match capture {
            Capture::None => Vec::new(),
            Capture::All => (0..gt.hidden.len()).collect(),
            Capture::Boundaries(list) => list.clone(),
        };
        let mut hidden = BTreeMap::new();
        for i in boundaries {
            let v = *gt.hidden.get(i).ok_or_else(|| {
                Error::param(format!(
                    "boundary {i} out of range for {} layers",
                    self.n_layers()
                ))
            })?;
            hidden.insert(i, g.value(v).clone());
        }
        Ok(ForwardTrace {
            hidden,
            final_state: g.value(gt.final_state).clone(),
            logits: g.value(gt.logits).clone(),
            layout: gt.layout,
        })
    }

    /// Greedy decoding of `n` tokens after the prompt.
    pub fn greedy_decode(&self, triplet: &Triplet, n: usize) -> Result<Vec<usize>> {
        self.greedy_decode_within(triplet, n, self.config.vocab_size)
    }

    /// Greedy decoding restricted to token ids below `limit`.
    pub fn greedy_decode_within(&self, triplet: &Triplet, n: usize, limit: usize) -> Result<Vec<usize>> {
        if limit == 0 || limit > self.config.vocab_size {
            return Err(Error::param(format!(
                "decode limit {limit} outside 1..={}",
                self.config.vocab_size
            )));
        }
        let mut t = Triplet {
            id: triplet.id,
            image: triplet.image.clone(),
            prompt: triplet.prompt.clone(),
            response: Vec::new(),
        };
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let trace = self.forward(&t, &Capture::None)?;
            let last = trace.layout.len() - 1;
            let next = argmax(&trace.logits.row(last)[..limit]);
            out.push(next);
            t.prompt.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
