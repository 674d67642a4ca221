//! Recovery objectives: response cross-entropy, temperature-softened logit
//! distillation (forward or reverse KL) and hidden-state L2 matching.

use prunekit_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Capture, ForwardTrace, GraphTrace, Model, TokenLayout, Triplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdDirection {
    /// `Σ p_T log(p_T / p_S)`
    Kl,
    /// `Σ p_S log(p_S / p_T)`
    Rkl,
    None,
}

/// Cross-entropy of the response tokens under teacher forcing.
pub fn sft_graph(g: &mut Graph<'_>, trace: &GraphTrace, triplet: &Triplet) -> Result<Var> {
    let layout = trace.layout;
    if layout.n_response == 0 {
        return Err(Error::Data("SFT needs a nonempty response".into()));
    }
    let n = layout.len();
    let mut targets = vec![0; n];
    let mut ignore = vec![true; n];
    for (j, p) in layout.loss_positions().into_iter().enumerate() {
        targets[p] = triplet.response[j];
        ignore[p] = false;
    }
    Ok(g.cross_entropy(trace.logits, &targets, &ignore)?)
}

pub fn sft_loss(model: &Model, triplet: &Triplet) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, &|_| false);
    let trace = model.forward_graph(&mut g, &b, triplet)?;
    let loss = sft_graph(&mut g, &trace, triplet)?;
    Ok(g.value(loss).item())
}

fn check_layouts(student: &TokenLayout, teacher: &TokenLayout) -> Result<()> {
    if student != teacher {
        return Err(Error::Contract(format!(
            "student layout {student:?} differs from teacher layout {teacher:?}"
        )));
    }
    Ok(())
}

/// Rows of the teacher's softened distribution at `positions`:
/// `(probabilities, log-probabilities)`, each `[n, V]`.
fn teacher_rows(teacher: &Tensor, positions: &[usize], tau: f64) -> Result<(Tensor, Tensor)> {
    let (_, v) = teacher.dims2()?;
    let mut probs = Vec::with_capacity(positions.len() * v);
    let mut logp = Vec::with_capacity(positions.len() * v);
    for &p in positions {
        let row = teacher.row(p);
        let max = row.iter().map(|x| x / tau).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x / tau - max).exp()).sum::<f64>().ln();
        for &x in row {
            let lp = x / tau - lse;
            logp.push(lp);
            probs.push(lp.exp());
        }
    }
    let shape = vec![positions.len(), v];
    Ok((Tensor::new(shape.clone(), probs)?, Tensor::new(shape, logp)?))
}

/// Token-averaged divergence over the response-predicting positions,
/// multiplied by `tau²`.
pub fn kd_graph(
    g: &mut Graph<'_>,
    student_logits: Var,
    layout: &TokenLayout,
    teacher_logits: &Tensor,
    teacher_layout: &TokenLayout,
    tau: f64,
    direction: KdDirection,
) -> Result<Var> {
    check_layouts(layout, teacher_layout)?;
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    if g.shape(student_logits) != teacher_logits.shape() {
        return Err(Error::Contract(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.shape(student_logits),
            teacher_logits.shape()
        )));
    }
    let positions = layout.loss_positions();
    let n = positions.len() as f64;
    let s = g.gather_rows(student_logits, &positions)?;
    let (pt, lpt) = teacher_rows(teacher_logits, &positions, tau)?;
    let lps = g.log_softmax(s, tau, 1)?;
    let lpt = g.constant(lpt);
    let weighted = match direction {
        KdDirection::Kl => {
            let diff = g.sub(lpt, lps)?;
            let pt = g.constant(pt);
            g.mul(pt, diff)?
        }
        KdDirection::Rkl => {
            let ps = g.softmax(s, tau, 1)?;
            let diff = g.sub(lps, lpt)?;
            g.mul(ps, diff)?
        }
        KdDirection::None => {
            let zero = g.scale(lps, 0.0)?;
            return Ok(g.sum(zero)?);
        }
    };
    let total = g.sum(weighted)?;
    Ok(g.scale(total, tau * tau / n)?)
}

pub fn kd_logits_loss(
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    tau: f64,
    direction: KdDirection,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.param(&student.logits, false);
    let loss = kd_graph(
        &mut g,
        s,
        &student.layout,
        &teacher.logits,
        &teacher.layout,
        tau,
        direction,
    )?;
    Ok(g.value(loss).item())
}

/// Mean over tokens of the squared L2 distance, averaged over the given
/// state pairs.
pub fn hidden_match_graph(g: &mut Graph<'_>, student: &[Var], teacher: &[&Tensor]) -> Result<Var> {
    if student.is_empty() || student.len() != teacher.len() {
        return Err(Error::Contract("hidden matching needs one teacher state per student state".into()));
    }
    let mut terms = Vec::with_capacity(student.len());
    for (&s, t) in student.iter().zip(teacher) {
        if g.shape(s) != t.shape() {
            return Err(Error::Contract(format!(
                "hidden width mismatch: student {:?} vs teacher {:?}",
                g.shape(s),
                t.shape()
            )));
        }
        let rows = t.shape()[0] as f64;
        let tc = g.constant((*t).clone());
        let diff = g.sub(s, tc)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq)?;
        terms.push(g.scale(total, 1.0 / rows)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64)?)
}

/// Boundary index for the `k`-th state from the end (1 = output of the last
/// layer).
pub fn boundary_from_end(n_layers: usize, k: usize) -> Result<usize> {
    if k == 0 || k > n_layers {
        return Err(Error::param(format!(
            "match layer {k} is outside 1..={n_layers}"
        )));
    }
    Ok(n_layers + 1 - k)
}

/// Matches the `k`-th-from-last layer outputs of the two traces for every
/// `k` in `layers`. Both traces must have captured those boundaries.
pub fn hidden_match_loss(
    student: &ForwardTrace,
    student_layers: usize,
    teacher: &ForwardTrace,
    teacher_layers: usize,
    layers: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let mut s = Vec::new();
    let mut t = Vec::new();
    for &k in layers {
        let sb = boundary_from_end(student_layers, k)?;
        let tb = boundary_from_end(teacher_layers, k)?;
        let missing = || Error::Contract(format!("trace lacks boundary for match layer {k}"));
        s.push(g.param(student.hidden.get(&sb).ok_or_else(missing)?, false));
        t.push(teacher.hidden.get(&tb).ok_or_else(missing)?);
    }
    let loss = hidden_match_graph(&mut g, &s, &t)?;
    Ok(g.value(loss).item())
}

/// Capture request covering the given from-the-end match layers.
pub fn match_capture(n_layers: usize, layers: &[usize]) -> Result<Capture> {
    let b = layers
        .iter()
        .map(|&k| boundary_from_end(n_layers, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Capture::Boundaries(b))
}
