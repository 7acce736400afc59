//! Task, logits-distillation, feature-distillation and composite objectives.

use crate::error::{shape_err, Error, Result};
use crate::labels::{keep_mask, LabelMap, IGNORE_LABEL};
use crate::prob::{check_tau, log_softmax_row, softmax_row, PROB_FLOOR};
use crate::tape::{BackwardFn, Tape, Var};
use crate::tensor::Tensor;

/// Which distribution is the reference in the logits KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KdDirection {
    /// `KL(p_teacher || p_student)`.
    #[default]
    TeacherToStudent,
    /// `KL(p_student || p_teacher)`.
    StudentToTeacher,
}

impl KdDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TeacherToStudent => "teacher-to-student",
            Self::StudentToTeacher => "student-to-teacher",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "teacher-to-student" => Some(Self::TeacherToStudent),
            "student-to-teacher" => Some(Self::StudentToTeacher),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kd_direction: KdDirection,
    pub warmup_fraction: f64,
    /// Multiplies both distillation terms by `tau^2`.
    pub tau2_scaling: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda1: 0.1,
            lambda2: 1.0,
            kd_direction: KdDirection::TeacherToStudent,
            warmup_fraction: 0.1,
            tau2_scaling: false,
        }
    }
}

impl DistillConfig {
    /// Defaults for a convolutional teacher: sharper temperature and a
    /// heavier distillation weight.
    pub fn conv_teacher() -> Self {
        Self {
            tau: 0.7,
            lambda2: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidParameter(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    fn distill_scale(&self) -> f64 {
        if self.tau2_scaling {
            self.tau * self.tau
        } else {
            1.0
        }
    }

    /// Effective coefficient of the logits KD term.
    pub fn kd_weight(&self) -> f64 {
        self.lambda1 * self.distill_scale()
    }

    /// Effective coefficient of the reweighted distillation term.
    pub fn hakd_weight(&self) -> f64 {
        self.lambda2 * self.distill_scale()
    }
}

fn pixels_of(t: &Tensor) -> usize {
    t.len() / t.last_dim().max(1)
}

struct Parts {
    value: f64,
    grad: Vec<f64>,
}

/// Value and student-side gradient of the mean per-pixel KL term.
fn kd_parts(z_s: &Tensor, z_t: &Tensor, tau: f64, dir: KdDirection, keep: &[bool]) -> Parts {
    let c = z_s.last_dim();
    let valid = keep.iter().filter(|&&k| k).count();
    let mut grad = vec![0.0; z_s.len()];
    if valid == 0 {
        return Parts { value: 0.0, grad };
    }
    let inv = 1.0 / valid as f64;
    let floor = PROB_FLOOR.ln();
    let (mut ps, mut pt, mut ls, mut lt) = (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    let mut total = 0.0;
    for (px, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        let r = px * c..(px + 1) * c;
        softmax_row(&z_s.data()[r.clone()], tau, &mut ps);
        softmax_row(&z_t.data()[r.clone()], tau, &mut pt);
        log_softmax_row(&z_s.data()[r.clone()], tau, &mut ls);
        log_softmax_row(&z_t.data()[r.clone()], tau, &mut lt);
        let g = &mut grad[r];
        match dir {
            KdDirection::TeacherToStudent => {
                let mut active = 0.0;
                for k in 0..c {
                    if pt[k] > 0.0 {
                        total += pt[k] * (lt[k] - ls[k]);
                    }
                    if ls[k] > floor {
                        active += pt[k];
                    }
                }
                for k in 0..c {
                    let own = if ls[k] > floor { pt[k] } else { 0.0 };
                    g[k] = -inv / tau * (own - ps[k] * active);
                }
            }
            KdDirection::StudentToTeacher => {
                let mut kl = 0.0;
                let mut active = 0.0;
                for k in 0..c {
                    if ps[k] > 0.0 {
                        kl += ps[k] * (ls[k] - lt[k]);
                    }
                    if ls[k] > floor {
                        active += ps[k];
                    }
                }
                total += kl;
                for k in 0..c {
                    let own = if ls[k] > floor { ps[k] } else { 0.0 };
                    let d = ls[k] - lt[k];
                    g[k] = inv / tau * (ps[k] * (d - kl) + own - ps[k] * active);
                }
            }
        }
    }
    Parts {
        value: total * inv,
        grad,
    }
}

/// Mean over non-ignore pixels of the KL divergence between per-pixel
/// temperature softmaxes of student and teacher logits.
pub fn kd_loss(
    z_s: &Tensor,
    z_t: &Tensor,
    tau: f64,
    dir: KdDirection,
    mask: Option<&LabelMap>,
) -> Result<f64> {
    check_tau(tau)?;
    z_s.expect_same_dims(z_t, "kd_loss")?;
    let keep = keep_mask(pixels_of(z_s), mask)?;
    Ok(kd_parts(z_s, z_t, tau, dir, &keep).value)
}

/// [`kd_loss`] on a tape; the teacher side is a constant.
pub fn kd_loss_var(
    tape: &mut Tape,
    z_s: Var,
    z_t: &Tensor,
    tau: f64,
    dir: KdDirection,
    mask: Option<&LabelMap>,
) -> Result<Var> {
    check_tau(tau)?;
    let zs = tape.value(z_s);
    zs.expect_same_dims(z_t, "kd_loss")?;
    let keep = keep_mask(pixels_of(zs), mask)?;
    let parts = kd_parts(zs, z_t, tau, dir, &keep);
    scalar_with_grad(tape, "kd_loss", z_s, parts)
}

fn scalar_with_grad(tape: &mut Tape, op: &'static str, input: Var, parts: Parts) -> Result<Var> {
    let grad = Tensor::from_parts(tape.dims(input).to_vec(), parts.grad);
    let bw: BackwardFn = Box::new(move |g, _| vec![Some(grad.map(|v| v * g.data()[0]))]);
    tape.record(op, &[input], Tensor::scalar(parts.value), Some(bw))
}

/// Mean over pixels of the channel-summed squared difference between the
/// teacher features and already projected student features.
pub fn fd_loss_projected(f_t: &Tensor, projected: &Tensor) -> Result<f64> {
    if f_t.dims() != projected.dims() {
        return shape_err(format!(
            "projected student features {:?} vs teacher {:?}",
            projected.dims(),
            f_t.dims()
        ));
    }
    let pixels = pixels_of(f_t).max(1) as f64;
    let sq: f64 = f_t.data().iter().zip(projected.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / pixels)
}

/// Feature distillation through the regression projector `psi`.
pub fn fd_loss(f_t: &Tensor, f_s: &Tensor, psi: &crate::projection::ProjectorParams) -> Result<f64> {
    let projected = crate::projection::project_features_psi(f_s, psi)?;
    fd_loss_projected(f_t, &projected)
}

/// [`fd_loss_projected`] on a tape, differentiable in the projected input.
pub fn fd_loss_var(tape: &mut Tape, f_t: &Tensor, projected: Var) -> Result<Var> {
    let p = tape.value(projected);
    let value = fd_loss_projected(f_t, p)?;
    let pixels = pixels_of(f_t).max(1) as f64;
    let grad = p.data().iter().zip(f_t.data()).map(|(a, b)| 2.0 * (a - b) / pixels).collect();
    scalar_with_grad(tape, "fd_loss", projected, Parts { value, grad })
}

fn task_parts(z: &Tensor, y: &LabelMap) -> Result<Parts> {
    y.expect_matches(z.dims())?;
    let c = z.last_dim();
    y.validate(c)?;
    let valid = y.valid_pixels();
    let mut grad = vec![0.0; z.len()];
    if valid == 0 {
        return Ok(Parts { value: 0.0, grad });
    }
    let inv = 1.0 / valid as f64;
    let floor = PROB_FLOOR.ln();
    let mut ls = vec![0.0; c];
    let mut total = 0.0;
    for (px, &label) in y.data().iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let r = px * c..(px + 1) * c;
        log_softmax_row(&z.data()[r.clone()], 1.0, &mut ls);
        let l = label as usize;
        total -= ls[l];
        if ls[l] > floor {
            for (k, g) in grad[r].iter_mut().enumerate() {
                let onehot = if k == l { 1.0 } else { 0.0 };
                *g = inv * (ls[k].exp() - onehot);
            }
        }
    }
    Ok(Parts {
        value: total * inv,
        grad,
    })
}

/// Mean pixel-wise cross-entropy over non-ignore pixels.
pub fn task_loss(z: &Tensor, y: &LabelMap) -> Result<f64> {
    Ok(task_parts(z, y)?.value)
}

pub fn task_loss_var(tape: &mut Tape, z: Var, y: &LabelMap) -> Result<Var> {
    let parts = task_parts(tape.value(z), y)?;
    scalar_with_grad(tape, "task_loss", z, parts)
}

/// `task + lambda1 * kd + lambda2 * hakd` (distillation terms optionally
/// scaled by `tau^2`).
pub fn total_loss(task: f64, kd: f64, hakd: f64, cfg: &DistillConfig) -> Result<f64> {
    if !(task.is_finite() && kd.is_finite() && hakd.is_finite()) {
        return Err(Error::NonFinite("loss component".into()));
    }
    Ok(task + cfg.kd_weight() * kd + cfg.hakd_weight() * hakd)
}

/// Tape version of [`total_loss`]. Absent terms contribute nothing to the
/// value or the graph.
pub fn total_loss_var(
    tape: &mut Tape,
    task: Var,
    kd: Option<Var>,
    hakd: Option<Var>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let mut acc = task;
    for (term, w) in [(kd, cfg.kd_weight()), (hakd, cfg.hakd_weight())] {
        if let Some(v) = term {
            let scaled = tape.scale(v, w)?;
            acc = tape.add(acc, scaled)?;
        }
    }
    Ok(acc)
}
