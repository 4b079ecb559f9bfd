//! Finite-difference verification of tape gradients in 64-bit.

use crate::error::{MftError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Largest acceptable [`GradCheckReport::max_error`].
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all checked elements of `|a − n| / max(1, |a|, |n|)`.
    pub max_error: f64,
    /// The same maximum, per input tensor.
    pub per_input: Vec<f64>,
    /// `(input, element)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= GRAD_TOLERANCE
    }
}

/// Compare the tape gradient of scalar `f` against central differences for
/// every element of every input.
///
/// ReLU units keep the on/off pattern of the unperturbed point during the
/// difference evaluations, so a stencil straddling a kink still measures the
/// derivative of the piece the point lies on.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, None)
}

/// As [`grad_check`], but the analytic pass runs on a tape whose backward
/// rules inside scope `fault` are deliberately wrong.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], fault: Option<&str>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = match fault {
        Some(name) => Tape::with_fault(name),
        None => Tape::new(),
    };
    tape.record_kinks();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_value(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let kinks = tape.take_kinks();
    drop(tape);

    // Inputs move into each evaluation tape and back out, so a probe costs
    // one forward pass and no copies.
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let evaluate = |work: &mut Vec<Tensor<f64>>| -> Result<f64> {
        let mut tape = Tape::with_kinks(kinks.clone());
        let vars: Vec<Var> = work.drain(..).map(|t| tape.leaf(t, false)).collect();
        let value = f(&mut tape, &vars).and_then(|out| scalar_value(&tape, out));
        work.extend(vars.iter().map(|&v| tape.take_value(v)));
        value
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        worst: None,
        elements: 0,
    };
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for e in 0..inputs[i].len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + FD_STEP;
            let plus = evaluate(&mut work)?;
            work[i].data_mut()[e] = orig - FD_STEP;
            let minus = evaluate(&mut work)?;
            work[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[e];
            if !a.is_finite() {
                return Err(MftError::Verifier(format!(
                    "non-finite analytic gradient at input {i}, element {e}"
                )));
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.elements += 1;
            if err > report.per_input[i] {
                report.per_input[i] = err;
            }
            if err > report.max_error || report.worst.is_none() {
                report.max_error = err;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}

fn scalar_value(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(MftError::Verifier(format!(
            "function must be scalar, got shape {:?}",
            t.shape()
        )));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(MftError::Verifier(format!("non-finite function value {x}")));
    }
    Ok(x)
}
