//! Differentiable layers built on [`Tape`]: convolution, normalization and
//! row softmax. Feature maps are NHWC; per-channel operations treat every
//! leading index as a row of the last axis.

use crate::error::{shape_err, Result};
use crate::tape::{BackwardFn, Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Default epsilon for batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
/// Layer-normalization epsilon. Small enough that normalized tokens keep
/// unit variance to within 1e-6 for any token variance above 1e-3.
pub const LN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

struct ConvPlan {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    geo: Conv2dGeometry,
}

impl ConvPlan {
    fn patch_len(&self) -> usize {
        self.geo.kernel * self.geo.kernel * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Visits every (output row, patch column, input offset) triple that
    /// falls inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.geo.kernel;
        let pl = self.patch_len();
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..k {
                        let iy = (oy * self.geo.stride + ky) as isize - self.geo.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix =
                                (ox * self.geo.stride + kx) as isize - self.geo.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = (ky * k + kx) * self.cin;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row * pl + col, src, self.cin);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.patch_len()];
        self.for_each_tap(|dst, src, len| {
            cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n * self.h * self.w * self.cin];
        self.for_each_tap(|dst, src, len| {
            for (xv, cv) in x[src..src + len].iter_mut().zip(&cols[dst..dst + len]) {
                *xv += cv;
            }
        });
        x
    }
}

/// 2-D convolution of NHWC `x` with a `[k, k, cin, cout]` kernel.
pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, geo: Conv2dGeometry) -> Result<Var> {
    let xd = tape.dims(x).to_vec();
    let wd = tape.dims(weight).to_vec();
    if xd.len() != 4 || wd.len() != 4 {
        return shape_err(format!("conv2d: input {xd:?}, kernel {wd:?}"));
    }
    if wd[0] != geo.kernel || wd[1] != geo.kernel || wd[2] != xd[3] {
        return shape_err(format!(
            "conv2d: kernel {wd:?} does not fit input channels {} with size {}",
            xd[3], geo.kernel
        ));
    }
    let (Some(ho), Some(wo)) = (geo.output_extent(xd[1]), geo.output_extent(xd[2])) else {
        return shape_err(format!("conv2d: input {xd:?} smaller than kernel"));
    };
    let plan = ConvPlan {
        n: xd[0],
        h: xd[1],
        w: xd[2],
        cin: xd[3],
        ho,
        wo,
        geo,
    };
    let cout = wd[3];
    let (p, kl) = (plan.rows(), plan.patch_len());
    let cols = plan.im2col(tape.value(x).data());
    let wv = tape.value(weight).clone();
    let mut out = vec![0.0; p * cout];
    gemm(p, kl, cout, &cols, false, wv.data(), false, &mut out, false);
    let value = Tensor::from_parts(vec![plan.n, ho, wo, cout], out);

    let bw: Option<BackwardFn> = tape.any_requires_grad(&[x, weight]).then(|| {
        Box::new(move |g: &Tensor, need: &[bool]| {
            let gx = need[0].then(|| {
                let mut dcols = vec![0.0; p * kl];
                gemm(p, cout, kl, g.data(), false, wv.data(), true, &mut dcols, false);
                Tensor::from_parts(vec![plan.n, plan.h, plan.w, plan.cin], plan.col2im(&dcols))
            });
            let gw = need[1].then(|| {
                let mut dw = vec![0.0; kl * cout];
                gemm(kl, p, cout, &cols, true, g.data(), false, &mut dw, false);
                Tensor::from_parts(wv.dims().to_vec(), dw)
            });
            vec![gx, gw]
        }) as BackwardFn
    });
    tape.record("conv2d", &[x, weight], value, bw)
}

/// Per-channel batch statistics (population variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn channel_stats(x: &Tensor) -> BatchStats {
    let c = x.last_dim();
    let rows = (x.len() / c.max(1)).max(1) as f64;
    let mut mean = vec![0.0; c];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for row in x.rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows);
    BatchStats { mean, var }
}

/// Normalization statistics source.
#[derive(Debug, Clone, Copy)]
pub enum Normalize<'a> {
    /// Use statistics of the current batch.
    Batch,
    /// Use fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Batch normalization over all leading axes of `x`, per last-axis channel.
/// Returns the batch statistics when they were used.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: Normalize<'_>,
    eps: f64,
) -> Result<(Var, Option<BatchStats>)> {
    let c = tape.value(x).last_dim();
    if tape.dims(gamma) != [c] || tape.dims(beta) != [c] {
        return shape_err(format!(
            "batch_norm: {c} channels, gamma {:?}, beta {:?}",
            tape.dims(gamma),
            tape.dims(beta)
        ));
    }
    let xv = tape.value(x).clone();
    let (used, batch) = match stats {
        Normalize::Batch => {
            let s = channel_stats(&xv);
            (s.clone(), Some(s))
        }
        Normalize::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return shape_err("batch_norm: running statistics length");
            }
            (
                BatchStats {
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                },
                None,
            )
        }
    };
    let inv_std: Vec<f64> = used.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = xv.clone();
    for row in xhat.data_mut().chunks_mut(c) {
        for ((v, m), s) in row.iter_mut().zip(&used.mean).zip(&inv_std) {
            *v = (*v - m) * s;
        }
    }
    let gv = tape.value(gamma).data().to_vec();
    let bv = tape.value(beta).data().to_vec();
    let mut out = xhat.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(&gv).zip(&bv) {
            *v = *v * g + b;
        }
    }
    let train = batch.is_some();
    let rows = (xv.len() / c.max(1)).max(1) as f64;

    let bw: Option<BackwardFn> = tape.any_requires_grad(&[x, gamma, beta]).then(|| {
        Box::new(move |g: &Tensor, need: &[bool]| {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (grow, hrow) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                for j in 0..c {
                    dgamma[j] += grow[j] * hrow[j];
                    dbeta[j] += grow[j];
                }
            }
            let gx = need[0].then(|| {
                let mut dx = g.clone();
                for (drow, hrow) in dx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
                    for j in 0..c {
                        let scale = gv[j] * inv_std[j];
                        drow[j] = if train {
                            scale * (drow[j] - dbeta[j] / rows - hrow[j] * dgamma[j] / rows)
                        } else {
                            scale * drow[j]
                        };
                    }
                }
                dx
            });
            vec![
                gx,
                need[1].then(|| Tensor::from_parts(vec![c], dgamma.clone())),
                need[2].then(|| Tensor::from_parts(vec![c], dbeta.clone())),
            ]
        }) as BackwardFn
    });
    let y = tape.record("batch_norm", &[x, gamma, beta], out, bw)?;
    Ok((y, batch))
}

/// Applies a momentum update of running statistics from batch statistics.
pub fn update_running(running_mean: &mut [f64], running_var: &mut [f64], batch: &BatchStats, momentum: f64) {
    for (r, b) in running_mean.iter_mut().zip(&batch.mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, b) in running_var.iter_mut().zip(&batch.var) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Layer normalization over the last axis.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let d = tape.value(x).last_dim();
    if tape.dims(gamma) != [d] || tape.dims(beta) != [d] {
        return shape_err(format!("layer_norm: width {d}, gamma {:?}", tape.dims(gamma)));
    }
    let xv = tape.value(x);
    let mut xhat = xv.clone();
    let mut inv_std = Vec::with_capacity(xv.len() / d.max(1));
    for row in xhat.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        inv_std.push(s);
    }
    let gv = tape.value(gamma).data().to_vec();
    let bv = tape.value(beta).data().to_vec();
    let mut out = xhat.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(&gv).zip(&bv) {
            *v = *v * g + b;
        }
    }
    let bw: Option<BackwardFn> = tape.any_requires_grad(&[x, gamma, beta]).then(|| {
        Box::new(move |g: &Tensor, need: &[bool]| {
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for (grow, hrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                for j in 0..d {
                    dgamma[j] += grow[j] * hrow[j];
                    dbeta[j] += grow[j];
                }
            }
            let gx = need[0].then(|| {
                let mut dx = g.clone();
                for ((drow, hrow), s) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(xhat.data().chunks(d))
                    .zip(&inv_std)
                {
                    let mut mean_g = 0.0;
                    let mut mean_gh = 0.0;
                    for j in 0..d {
                        let gg = drow[j] * gv[j];
                        mean_g += gg;
                        mean_gh += gg * hrow[j];
                    }
                    mean_g /= d as f64;
                    mean_gh /= d as f64;
                    for j in 0..d {
                        drow[j] = s * (drow[j] * gv[j] - mean_g - hrow[j] * mean_gh);
                    }
                }
                dx
            });
            vec![
                gx,
                need[1].then(|| Tensor::from_parts(vec![d], dgamma.clone())),
                need[2].then(|| Tensor::from_parts(vec![d], dbeta.clone())),
            ]
        }) as BackwardFn
    });
    tape.record("layer_norm", &[x, gamma, beta], out, bw)
}

/// Softmax of `scale * x` along the last axis.
pub fn softmax_rows(tape: &mut Tape, x: Var, scale: f64) -> Result<Var> {
    let c = tape.value(x).last_dim();
    let mut y = tape.value(x).clone();
    for row in y.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) * scale).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    let yv = y.clone();
    let bw: Option<BackwardFn> = tape.requires_grad(x).then(|| {
        Box::new(move |g: &Tensor, _: &[bool]| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(yv.data().chunks(c)) {
                let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (dv, yv) in drow.iter_mut().zip(yrow) {
                    *dv = scale * yv * (*dv - dot);
                }
            }
            vec![Some(dx)]
        }) as BackwardFn
    });
    tape.record("softmax_rows", &[x], y, bw)
}
