//! Central finite-difference gradient checking at 64-bit precision.

use alloc::vec::Vec;

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Input and flat coordinate where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates_checked: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences using the relative step `eps * max(1, |x|)`.
///
/// At most `max_coords` coordinates per input are probed, spread evenly over
/// the buffer; pass `usize::MAX` to probe every coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Usage("grad_check needs a scalar function".into()));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates_checked: 0 };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every leaf has a gradient");
        let n = inputs[which].numel();
        let step = if n <= max_coords { 1 } else { n.div_ceil(max_coords) };
        for i in (0..n).step_by(step.max(1)) {
            let x0 = inputs[which].data()[i];
            let h = eps * x0.abs().max(1.0);
            probe[which].data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, i);
            }
            report.coordinates_checked += 1;
        }
    }
    Ok(report)
}
