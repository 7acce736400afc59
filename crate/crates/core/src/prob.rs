//! Probability transforms over the last tensor axis.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to probabilities before taking a logarithm; clamping
/// happens nowhere else.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// `ln(max(p, PROB_FLOOR))`.
#[inline]
pub fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Softmax of `z / tau` written into `out`, using max-subtraction.
pub(crate) fn softmax_row(z: &[f64], tau: f64, out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - m) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log-softmax of `z / tau`, floored at `ln(PROB_FLOOR)`.
pub(crate) fn log_softmax_row(z: &[f64], tau: f64, out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = z.iter().map(|&v| ((v - m) / tau).exp()).sum();
    let lse = total.ln();
    let floor = PROB_FLOOR.ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - m) / tau - lse).max(floor);
    }
}

/// Temperature softmax over the last axis of `logits`.
pub fn softmax_temperature(logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    if logits.ndim() == 0 || logits.last_dim() == 0 {
        return shape_err("softmax needs at least one class on the last axis");
    }
    if !logits.all_finite() {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let c = logits.last_dim();
    let mut out = vec![0.0; logits.len()];
    for (z, o) in logits.data().chunks(c).zip(out.chunks_mut(c)) {
        softmax_row(z, tau, o);
    }
    Ok(Tensor::from_parts(logits.dims().to_vec(), out))
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::InvalidInput("non-finite sigmoid input".into()));
    }
    Ok(x.map(sigmoid_scalar))
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)` with `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return shape_err(format!("kl_divergence: lengths {} vs {}", p.len(), q.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - floored_ln(qi)))
        .sum::<f64>()
}
