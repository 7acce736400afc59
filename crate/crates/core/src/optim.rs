//! Optimizers, learning-rate schedule and the generic training step.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const POLY_POWER: f64 = 0.9;

/// `base * (1 - iter / total)^0.9`, reaching 0 at `iter >= total`.
pub fn poly_lr(base: f64, iter: usize, total: usize) -> f64 {
    if total == 0 || iter >= total {
        return 0.0;
    }
    base * (1.0 - iter as f64 / total as f64).powf(POLY_POWER)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball SGD with coupled L2 weight decay.
    Sgd { momentum: f64, weight_decay: f64 },
    /// Adam with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::Sgd { momentum, weight_decay }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Optimizer state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Momentum buffer (SGD) or first moment (AdamW), per tensor.
    pub first: Vec<Vec<f64>>,
    /// Second moment (AdamW only).
    pub second: Vec<Vec<f64>>,
    pub steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let second = match kind {
            OptimizerKind::AdamW { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            first: zeros,
            second,
            steps: 0,
        }
    }

    /// Applies one update with learning rate `lr`; `grads[i]` belongs to
    /// parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} slots, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                for ((p, g), buf) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                        let d = gi + weight_decay * *w;
                        *b = momentum * *b + d;
                        *w -= lr * *b;
                    }
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * weight_decay * *w;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        if !params.all_finite() {
            return Err(non_finite_params("parameter update", None, params));
        }
        Ok(())
    }
}

/// Gradients of every bound parameter, zero where the output does not
/// depend on it.
pub fn collect_grads(grads: &Gradients, vars: &[Var], params: &ParamStore) -> Vec<Tensor> {
    vars.iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect()
}

pub(crate) fn non_finite_params(what: &str, batch_id: Option<usize>, params: &ParamStore) -> Error {
    let norms: Vec<String> = params.norms().into_iter().map(|(n, v)| format!("{n}={v:.6e}")).collect();
    let batch = batch_id.map(|b| format!(" in batch {b}")).unwrap_or_default();
    Error::NonFinite(format!("{what}{batch}; parameter norms: {}", norms.join(", ")))
}

/// Adds the batch id and parameter norms to a non-finite failure.
pub fn with_diagnostics<T>(r: Result<T>, batch_id: usize, params: &ParamStore) -> Result<T> {
    match r {
        Err(Error::NonFinite(what)) => Err(non_finite_params(&what, Some(batch_id), params)),
        other => other,
    }
}

/// One optimization step of a single parameter group: binds the
/// parameters on a fresh tape, evaluates `loss_fn`, backpropagates and
/// updates. `loss_fn` returns the scalar loss and any extra value the caller
/// needs (for instance normalization statistics).
pub fn train_step<T, F>(
    params: &mut ParamStore,
    opt: &mut Optimizer,
    lr: f64,
    batch_id: usize,
    loss_fn: F,
) -> Result<(f64, T)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<(Var, T)>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let run = || -> Result<(f64, T, Vec<Tensor>)> {
        let (loss, extra) = loss_fn(&mut tape, &vars)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, extra, collect_grads(&grads, &vars, params)))
    };
    let (value, extra, grads) = with_diagnostics(run(), batch_id, params)?;
    with_diagnostics(opt.step(params, &grads, lr), batch_id, params)?;
    Ok((value, extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap());
        p
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 600), 0.01);
        assert_eq!(poly_lr(0.01, 600, 600), 0.0);
        let mid = poly_lr(0.01, 300, 600);
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn sgd_hand_step() {
        let mut p = store(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.0, 0.0), &p);
        let (loss, ()) = train_step(&mut p, &mut opt, 0.1, 0, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok((t.sum(sq)?, ()))
        })
        .unwrap();
        assert_eq!(loss, 1.0);
        assert!((p.tensors()[0].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        for kind in [OptimizerKind::sgd(0.9, 1e-2), OptimizerKind::adamw(1e-2)] {
            let mut p = store(&[2.0, -1.0]);
            let mut opt = Optimizer::new(kind, &p);
            train_step(&mut p, &mut opt, 0.1, 0, |t, _| Ok((t.constant(Tensor::scalar(3.0)), ()))).unwrap();
            let got = p.tensors()[0].data().to_vec();
            match kind {
                OptimizerKind::Sgd { .. } => assert_eq!(got, vec![2.0 - 0.1 * 0.02, -1.0 + 0.1 * 0.01]),
                OptimizerKind::AdamW { .. } => assert_eq!(got, vec![2.0 * (1.0 - 0.1 * 1e-2), -(1.0 - 0.1 * 1e-2)]),
            }
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = store(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 0.0), &p);
        let g = [Tensor::from_slice(&[1.0]).unwrap()];
        opt.step(&mut p, &g, 0.1).unwrap();
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.tensors()[0].data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_loss_reports_batch_and_norms() {
        let mut p = store(&[3.0, 4.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 0.0), &p);
        let err = train_step(&mut p, &mut opt, 0.1, 17, |t, v| {
            let big = t.scale(v[0], 1e300)?;
            let sq = t.mul(big, big)?;
            Ok((t.sum(sq)?, ()))
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(msg.contains("batch 17") && msg.contains("w=5.0"), "{msg}");
        assert_eq!(p.tensors()[0].data(), &[3.0, 4.0]);
    }
}
