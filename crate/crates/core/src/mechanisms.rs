//! Label-referenced knowledge mixing and evaluation.
//!
//! Both teacher and student logits maps (`[.., C]`, already aligned to label
//! resolution) are scored per pixel and per channel against the one-hot
//! label. The scores decide how much of the teacher to blend into the
//! hybrid target and how strongly each channel of the distillation loss is
//! weighted. All maps here are teaching signals: none of them carries a
//! gradient, and only the student logits inside [`hakd_loss_var`] do.

use crate::error::{Error, Result};
use crate::labels::{keep_mask, LabelMap, IGNORE_LABEL};
use crate::prob::{check_tau, log_softmax_row, softmax_row, PROB_FLOOR};
use crate::tape::{BackwardFn, Tape, Var};
use crate::tensor::Tensor;

pub type ReliabilityMap = Tensor;
pub type MixWeightMap = Tensor;
pub type ImportanceMap = Tensor;
pub type KemWeightMap = Tensor;

/// `S` used when teacher and student are both perfectly reliable.
pub const TIE_WEIGHT: f64 = 0.5;
const TIE_EPS: f64 = 1e-12;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy of one logit channel against its indicator, with
/// the sigmoid clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
///
/// `-ln(sigmoid(z))` is evaluated as `softplus(-z)` and
/// `-ln(1 - sigmoid(z))` as `softplus(z)`; the clamp maps to bounds on the
/// result.
pub fn channel_reliability(z: f64, is_label: bool) -> f64 {
    let lo = -(-PROB_FLOOR).ln_1p();
    let hi = -PROB_FLOOR.ln();
    let raw = if is_label { softplus(-z) } else { softplus(z) };
    raw.clamp(lo, hi)
}

/// Per-pixel, per-channel reliability of logits `z` against labels `y`.
/// Ignore pixels hold 0.
pub fn reliability(z: &Tensor, y: &LabelMap) -> Result<ReliabilityMap> {
    y.expect_matches(z.dims())?;
    let c = z.last_dim();
    y.validate(c)?;
    let mut out = vec![0.0; z.len()];
    for ((zrow, orow), &label) in z.data().chunks(c).zip(out.chunks_mut(c)).zip(y.data()) {
        if label == IGNORE_LABEL {
            continue;
        }
        for (ch, (o, &zv)) in orow.iter_mut().zip(zrow).enumerate() {
            *o = channel_reliability(zv, ch == label as usize);
        }
    }
    Ok(Tensor::from_parts(z.dims().to_vec(), out))
}

/// Teacher weight `S = 1 - H_t / (H_t + H_s)`, or [`TIE_WEIGHT`] when both
/// are (numerically) zero.
pub fn mixing_weights(h_t: &ReliabilityMap, h_s: &ReliabilityMap) -> Result<MixWeightMap> {
    h_t.expect_same_dims(h_s, "mixing_weights")?;
    if h_t.data().iter().chain(h_s.data()).any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("negative reliability".into()));
    }
    h_t.zip_map(h_s, |t, s| {
        let total = t + s;
        if total < TIE_EPS {
            TIE_WEIGHT
        } else {
            1.0 - t / total
        }
    })
}

/// `S * Z_t + (1 - S) * Z_s`.
pub fn hybrid_logits(z_t: &Tensor, z_s: &Tensor, s: &MixWeightMap) -> Result<Tensor> {
    z_t.expect_same_dims(z_s, "hybrid_logits")?;
    z_t.expect_same_dims(s, "hybrid_logits")?;
    if s.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidInput("mixing weight outside [0, 1]".into()));
    }
    let data = z_t
        .data()
        .iter()
        .zip(z_s.data())
        .zip(s.data())
        .map(|((&t, &st), &w)| w * t + (1.0 - w) * st)
        .collect();
    Ok(Tensor::from_parts(z_t.dims().to_vec(), data))
}

/// `1[H_s > H_hybrid] * (H_s - H_hybrid)`.
pub fn relative_importance(h_s: &ReliabilityMap, h_hybrid: &ReliabilityMap) -> Result<ImportanceMap> {
    h_s.zip_map(h_hybrid, |s, h| if s > h { s - h } else { 0.0 })
}

/// Per-pixel softmax over channels of `H_s + dH`.
pub fn kem_weights(h_s: &ReliabilityMap, delta: &ImportanceMap) -> Result<KemWeightMap> {
    h_s.expect_same_dims(delta, "kem_weights")?;
    if delta.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("negative importance".into()));
    }
    let c = h_s.last_dim();
    let mut out = vec![0.0; h_s.len()];
    let mut score = vec![0.0; c];
    for ((hrow, drow), orow) in h_s.data().chunks(c).zip(delta.data().chunks(c)).zip(out.chunks_mut(c)) {
        for ((sc, h), d) in score.iter_mut().zip(hrow).zip(drow) {
            *sc = h + d;
        }
        softmax_row(&score, 1.0, orow);
    }
    Ok(Tensor::from_parts(h_s.dims().to_vec(), out))
}

/// Two-branch form of the channel weights: channels with positive
/// importance use `exp(H_s + dH)` in the numerator, the rest `exp(H_s)`;
/// both share the denominator `sum_i exp(H_s,i + dH_i)`.
pub fn kem_weights_branched(h_s: &ReliabilityMap, delta: &ImportanceMap) -> Result<KemWeightMap> {
    h_s.expect_same_dims(delta, "kem_weights_branched")?;
    let c = h_s.last_dim();
    let mut out = vec![0.0; h_s.len()];
    for ((hrow, drow), orow) in h_s.data().chunks(c).zip(delta.data().chunks(c)).zip(out.chunks_mut(c)) {
        let m = hrow
            .iter()
            .zip(drow)
            .map(|(h, d)| h + d)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = hrow.iter().zip(drow).map(|(h, d)| (h + d - m).exp()).sum();
        for ((o, &h), &d) in orow.iter_mut().zip(hrow).zip(drow) {
            let num = if d > 0.0 { (h + d - m).exp() } else { (h - m).exp() };
            *o = num / denom;
        }
    }
    Ok(Tensor::from_parts(h_s.dims().to_vec(), out))
}

/// Every intermediate map of the mixing and evaluation steps for one batch.
#[derive(Debug, Clone)]
pub struct TeachingSignals {
    pub h_teacher: ReliabilityMap,
    pub h_student: ReliabilityMap,
    pub mix: MixWeightMap,
    pub hybrid: Tensor,
    pub h_hybrid: ReliabilityMap,
    pub importance: ImportanceMap,
    pub weights: KemWeightMap,
}

impl TeachingSignals {
    /// Runs reliability, mixing, hybrid construction, importance and channel
    /// weighting for aligned teacher and student logits.
    pub fn compute(z_t: &Tensor, z_s: &Tensor, y: &LabelMap) -> Result<Self> {
        z_t.expect_same_dims(z_s, "teaching signals")?;
        let h_teacher = reliability(z_t, y)?;
        let h_student = reliability(z_s, y)?;
        let mix = mixing_weights(&h_teacher, &h_student)?;
        let hybrid = hybrid_logits(z_t, z_s, &mix)?;
        let h_hybrid = reliability(&hybrid, y)?;
        let importance = relative_importance(&h_student, &h_hybrid)?;
        let weights = kem_weights(&h_student, &importance)?;
        Ok(Self {
            h_teacher,
            h_student,
            mix,
            hybrid,
            h_hybrid,
            importance,
            weights,
        })
    }

    pub fn named_maps(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("reliability_teacher", &self.h_teacher),
            ("reliability_student", &self.h_student),
            ("mix_weights", &self.mix),
            ("hybrid_logits", &self.hybrid),
            ("reliability_hybrid", &self.h_hybrid),
            ("importance", &self.importance),
            ("kem_weights", &self.weights),
        ]
    }
}

struct HakdParts {
    value: f64,
    grad: Vec<f64>,
}

fn hakd_parts(hybrid: &Tensor, z_s: &Tensor, w: &Tensor, tau: f64, keep: &[bool]) -> HakdParts {
    let c = z_s.last_dim();
    let valid = keep.iter().filter(|&&k| k).count();
    let mut grad = vec![0.0; z_s.len()];
    if valid == 0 || c == 0 {
        return HakdParts { value: 0.0, grad };
    }
    let norm = 1.0 / (c as f64 * valid as f64);
    let floor = PROB_FLOOR.ln();
    let mut p_hat = vec![0.0; c];
    let mut log_q = vec![0.0; c];
    let mut total = 0.0;
    for (px, &k) in keep.iter().enumerate() {
        if !k {
            continue;
        }
        let range = px * c..(px + 1) * c;
        softmax_row(&hybrid.data()[range.clone()], tau, &mut p_hat);
        log_softmax_row(&z_s.data()[range.clone()], tau, &mut log_q);
        let wrow = &w.data()[range.clone()];
        let mut pixel = 0.0;
        let mut active_sum = 0.0;
        for ch in 0..c {
            let a = p_hat[ch] * wrow[ch];
            pixel += a * log_q[ch];
            if log_q[ch] > floor {
                active_sum += a;
            }
        }
        total += pixel;
        let g = &mut grad[range];
        for ch in 0..c {
            let q = log_q[ch].exp();
            let own = if log_q[ch] > floor { p_hat[ch] * wrow[ch] } else { 0.0 };
            g[ch] = -norm / tau * (own - q * active_sum);
        }
    }
    HakdParts {
        value: -norm * total,
        grad,
    }
}

fn check_hakd_inputs(hybrid: &Tensor, z_s: &Tensor, w: &Tensor, tau: f64) -> Result<()> {
    check_tau(tau)?;
    hybrid.expect_same_dims(z_s, "hakd_loss")?;
    hybrid.expect_same_dims(w, "hakd_loss")
}

/// Channel-reweighted distillation of the hybrid target into the student:
/// `-(1/C) * mean_px sum_c softmax_c(hybrid/tau) ln softmax_c(z_s/tau) W_c`
/// over pixels not marked ignore in `mask`.
pub fn hakd_loss(
    hybrid: &Tensor,
    z_s: &Tensor,
    w: &KemWeightMap,
    tau: f64,
    mask: Option<&LabelMap>,
) -> Result<f64> {
    check_hakd_inputs(hybrid, z_s, w, tau)?;
    let keep = keep_mask(z_s.len() / z_s.last_dim().max(1), mask)?;
    Ok(hakd_parts(hybrid, z_s, w, tau, &keep).value)
}

/// [`hakd_loss`] recorded on a tape; the gradient reaches `z_s` only.
pub fn hakd_loss_var(
    tape: &mut Tape,
    hybrid: &Tensor,
    z_s: Var,
    w: &KemWeightMap,
    tau: f64,
    mask: Option<&LabelMap>,
) -> Result<Var> {
    let zs = tape.value(z_s);
    check_hakd_inputs(hybrid, zs, w, tau)?;
    let keep = keep_mask(zs.len() / zs.last_dim().max(1), mask)?;
    let parts = hakd_parts(hybrid, zs, w, tau, &keep);
    let dims = zs.dims().to_vec();
    let grad = Tensor::from_parts(dims, parts.grad);
    let bw: BackwardFn = Box::new(move |g, _| vec![Some(grad.map(|v| v * g.data()[0]))]);
    tape.record("hakd_loss", &[z_s], Tensor::scalar(parts.value), Some(bw))
}
