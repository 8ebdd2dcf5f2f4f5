//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error among entries whose absolute error exceeds the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function against central
/// differences on every element of every input.
///
/// `f` receives fresh leaves for `inputs` and must return a scalar.
/// Straight-through ops are perturbed through their surrogate (see
/// [`Tape::with_straight_through_anchors`]), so `f` must issue them in the
/// same order on every call.
pub fn check_gradients<F>(cfg: GradCheck, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let (analytic, anchors): (Vec<Tensor<f64>>, Vec<Tensor<f64>>) = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        (
            vars.iter().map(|&v| grads.get_or_zeros(v)).collect(),
            tape.straight_through_inputs(),
        )
    };

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::with_straight_through_anchors(anchors.clone());
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[j];
            let abs = (a - numeric).abs();
            let rel = if abs <= cfg.abs_floor {
                0.0
            } else {
                abs / a.abs().max(numeric.abs())
            };
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j, a, numeric));
            }
            if rel >= cfg.rel_tol {
                report.passed = false;
            }
        }
    }
    Ok(report)
}
