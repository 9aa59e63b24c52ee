use super::tape::{Tape, TapeMode, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_relative_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks the gradient of a scalar function of `inputs` in training-mode
/// tapes with dropout disabled.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_mode(TapeMode::training(0), f, inputs, eps)
}

pub fn grad_check_with_mode<F>(
    mode: TapeMode,
    f: F,
    inputs: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-6, 1e-4]")));
    }
    let mode = TapeMode {
        strict: true,
        deterministic: true,
        ..mode
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(mode);
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::invalid("grad_check: function is not scalar-valued"));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
