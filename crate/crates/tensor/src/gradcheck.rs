//! Central finite-difference gradient verification.
//!
//! The checker only evaluates forward passes, so it stays independent of the
//! backward rules it is used to verify. It always runs in 64-bit mode.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::precision::{self, Precision};
use crate::tensor::Tensor;

/// Denominator floor for the relative error. Elements whose analytic and
/// numeric gradients are both below it are compared absolutely against it.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// differences with the given `step`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let _mode = precision::scoped(Precision::F64);
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[ti].data_mut()[e] = orig + step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[e] = orig - step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti].data()[e];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
