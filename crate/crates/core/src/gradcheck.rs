//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar<F>(f: &F, input: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = f(&mut tape, x)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "scalar_fn returned dims {:?}",
            v.dims()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of `f` at `input` with
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn grad_check_report<F>(f: F, input: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = f(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "scalar_fn returned dims {:?}",
            tape.value(out).dims()
        )));
    }
    let analytic = tape.backward(out)?.get_or_zeros(x, input);

    let mut numeric = vec![0.0; input.len()];
    let mut probe = input.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * step);
    }
    let numeric = Tensor::from_parts(input.dims().to_vec(), numeric);

    let (worst_index, max_rel_err) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

/// Maximum relative error between tape and finite-difference gradients.
pub fn grad_check<F>(f: F, input: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_report(f, input, step).map(|r| r.max_rel_err)
}
