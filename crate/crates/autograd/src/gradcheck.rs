//! Central finite-difference gradient checking against the tape.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that pairs of near-zero
/// gradients do not register as large relative mismatches.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// (input index, flat element index) of the worst relative mismatch.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F, E>(inputs: &[Tensor], f: &F) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    let tape = Tape::inference();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    Ok(out.value().item())
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences
/// of step `h` for every element of every input. Generic over the closure's
/// error type so that callers can use their own error enums.
pub fn check_gradients<F, E>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };
    let mut report = GradReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, worst: None };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            probe[which].data_mut()[i] = orig + h;
            let up = eval_scalar(&probe, &f)?;
            probe[which].data_mut()[i] = orig - h;
            let down = eval_scalar(&probe, &f)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[which].data()[i];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((which, i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
