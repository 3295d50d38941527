//! Central finite-difference gradient checks against the autodiff tape.

use crate::error::Result;
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Below this norm both gradients are treated as zero.
const NORM_FLOOR: f64 = 1e-8;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` per input.
    pub rel_errors: Vec<f64>,
    pub analytic_norms: Vec<f64>,
    pub max_rel_error: f64,
    /// Reverse-mode gradient per input.
    pub analytic: Vec<Tensor>,
    /// Central-difference gradient per input.
    pub numeric: Vec<Tensor>,
}

/// Relative error of two gradient tensors, norm-wise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&leaves)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);
    drop(loss);
    drop(leaves);

    let mut consts: Vec<Var> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
    let mut report = GradReport {
        rel_errors: Vec::with_capacity(inputs.len()),
        analytic_norms: Vec::with_capacity(inputs.len()),
        max_rel_error: 0.0,
        analytic: Vec::with_capacity(inputs.len()),
        numeric: Vec::with_capacity(inputs.len()),
    };
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64, consts: &mut Vec<Var>| -> Result<f64> {
                let mut t = input.clone();
                t.data_mut()[e] += delta;
                consts[i] = Var::constant(t);
                f(consts)?.value().item()
            };
            let plus = eval(h, &mut consts)?;
            let minus = eval(-h, &mut consts)?;
            *slot = (plus - minus) / (2.0 * h);
        }
        consts[i] = Var::constant(input.clone());
        let err = relative_error(analytic[i].data(), &numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.rel_errors.push(err);
        report.analytic_norms.push(analytic[i].norm());
        report.numeric.push(Tensor::new(input.shape().to_vec(), numeric)?);
    }
    report.analytic = analytic;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // the analytic gradient is correct; compare against a perturbed one
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.1]) > 1e-2);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn polynomial_passes() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let r = check_gradients(|v| v[0].mul(&v[0])?.mul(&v[0])?.sum(), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
