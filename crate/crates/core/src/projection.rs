//! Projection of backbone features into the per-pixel logits space, the
//! feature-regression projector, and spatial alignment of maps.
//!
//! Feature and logits maps are NHWC tensors (`[N, H, W, d]` and
//! `[N, H, W, C]`); a single `[H, W, C]` map is also accepted by
//! [`align_spatial`].

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, BatchStats, Normalize};
use crate::params::ParamStore;
use crate::tape::{BackwardFn, Tape, Var};
use crate::tensor::Tensor;

pub type FeatureMap = Tensor;
pub type LogitsMap = Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    Bilinear,
    Nearest,
}

const WEIGHT: usize = 0;
const BIAS: usize = 1;
const GAMMA: usize = 2;
const BETA: usize = 3;

/// Per-pixel linear map `d -> C` followed by batch normalization and a
/// rectifier. The same parameters, minus the normalization, serve as the
/// feature regression projector.
#[derive(Debug)]
pub struct ProjectorParams {
    /// `weight [C, d]`, `bias [C]`, `bn_gamma [C]`, `bn_beta [C]`.
    pub params: ParamStore,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub mode: Mode,
    evaluations: AtomicU64,
}

impl Clone for ProjectorParams {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            bn_running_mean: self.bn_running_mean.clone(),
            bn_running_var: self.bn_running_var.clone(),
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            mode: self.mode,
            evaluations: AtomicU64::new(self.evaluations()),
        }
    }
}

impl ProjectorParams {
    pub const PARAM_NAMES: [&'static str; 4] = ["weight", "bias", "bn_gamma", "bn_beta"];

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.dims() != [weight.dims()[0]] {
            return shape_err(format!(
                "projector weight {:?} with bias {:?}",
                weight.dims(),
                bias.dims()
            ));
        }
        let c = weight.dims()[0];
        let mut params = ParamStore::new();
        params.insert("weight", weight);
        params.insert("bias", bias);
        params.insert("bn_gamma", Tensor::full(&[c], 1.0));
        params.insert("bn_beta", Tensor::zeros(&[c]));
        Ok(Self {
            params,
            bn_running_mean: vec![0.0; c],
            bn_running_var: vec![1.0; c],
            bn_eps: nn::BN_EPS,
            bn_momentum: nn::BN_MOMENTUM,
            mode: Mode::Train,
            evaluations: AtomicU64::new(0),
        })
    }

    /// Uniform fan-in initialization, zero bias, identity normalization.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self::from_parts(
            Tensor::from_parts(vec![out_dim, in_dim], w),
            Tensor::zeros(&[out_dim]),
        )
        .expect("consistent shapes")
    }

    pub fn weight(&self) -> &Tensor {
        &self.params.tensors()[WEIGHT]
    }

    pub fn bias(&self) -> &Tensor {
        &self.params.tensors()[BIAS]
    }

    pub fn in_dim(&self) -> usize {
        self.weight().dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight().dims()[0]
    }

    /// Number of forward evaluations performed with these parameters.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 || dims[3] != self.in_dim() {
            return shape_err(format!(
                "projector expects [N, H, W, {}] features, got {dims:?}",
                self.in_dim()
            ));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, vars: &[Var], f: Var) -> Result<Var> {
        self.check_input(tape.dims(f))?;
        let d = tape.dims(f).to_vec();
        let rows = d[0] * d[1] * d[2];
        let flat = tape.reshape(f, &[rows, d[3]])?;
        let y = tape.matmul(flat, vars[WEIGHT], false, true)?;
        let y = tape.add_bias(y, vars[BIAS])?;
        tape.reshape(y, &[d[0], d[1], d[2], self.out_dim()])
    }

    /// Records linear -> batch norm -> rectifier on `tape`. `vars` come from
    /// binding [`Self::params`]. Returns batch statistics in train mode.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        f: Var,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let y = self.linear(tape, vars, f)?;
        let stats = match self.mode {
            Mode::Train => Normalize::Batch,
            Mode::Eval => Normalize::Running {
                mean: &self.bn_running_mean,
                var: &self.bn_running_var,
            },
        };
        let (y, batch) = nn::batch_norm(tape, y, vars[GAMMA], vars[BETA], stats, self.bn_eps)?;
        Ok((tape.relu(y)?, batch))
    }

    /// Records the plain per-pixel linear map.
    pub fn forward_features(&self, tape: &mut Tape, vars: &[Var], f: Var) -> Result<Var> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.linear(tape, vars, f)
    }

    pub fn apply_batch_stats(&mut self, stats: &BatchStats) {
        nn::update_running(
            &mut self.bn_running_mean,
            &mut self.bn_running_var,
            stats,
            self.bn_momentum,
        );
    }
}

/// Projects features to logits at feature resolution. In train mode the
/// running statistics are updated from the batch.
pub fn project_to_logits(f: &FeatureMap, params: &mut ProjectorParams) -> Result<LogitsMap> {
    let mut tape = Tape::new();
    let vars = params.params.bind(&mut tape, false);
    let fv = tape.constant(f.clone());
    let (z, stats) = params.forward_logits(&mut tape, &vars, fv)?;
    let out = tape.value(z).clone();
    if let Some(stats) = stats {
        params.apply_batch_stats(&stats);
    }
    Ok(out)
}

/// Maps student features to the teacher feature depth with the linear part
/// of `params` only.
pub fn project_features_psi(f_s: &FeatureMap, params: &ProjectorParams) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let vars = params.params.bind(&mut tape, false);
    let fv = tape.constant(f_s.clone());
    let y = params.forward_features(&mut tape, &vars, fv)?;
    Ok(tape.value(y).clone())
}

/// Source sampling positions along one axis.
#[derive(Debug, Clone)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_table(src: usize, dst: usize, method: ResampleMethod) -> AxisTable {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    let mut t = AxisTable {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let lo = pos.floor();
        match method {
            ResampleMethod::Bilinear => {
                let lo_i = lo as usize;
                t.lo.push(lo_i);
                t.hi.push((lo_i + 1).min(src - 1));
                t.frac.push(pos - lo);
            }
            ResampleMethod::Nearest => {
                t.lo.push(lo as usize);
                t.hi.push(lo as usize);
                t.frac.push(0.0);
            }
        }
    }
    t
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn resample_nhwc(x: &Tensor, out_h: usize, out_w: usize, method: ResampleMethod) -> Tensor {
    let d = x.dims();
    let (n, h, w, c) = (d[0], d[1], d[2], d[3]);
    let ty = axis_table(h, out_h, method);
    let tx = axis_table(w, out_w, method);
    let src = x.data();
    let mut out = vec![0.0; n * out_h * out_w * c];
    for b in 0..n {
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let p00 = ((b * h + y0) * w + x0) * c;
                let p01 = ((b * h + y0) * w + x1) * c;
                let p10 = ((b * h + y1) * w + x0) * c;
                let p11 = ((b * h + y1) * w + x1) * c;
                let dst = ((b * out_h + oy) * out_w + ox) * c;
                for ch in 0..c {
                    let top = lerp(src[p00 + ch], src[p01 + ch], fx);
                    let bottom = lerp(src[p10 + ch], src[p11 + ch], fx);
                    out[dst + ch] = lerp(top, bottom, fy);
                }
            }
        }
    }
    Tensor::from_parts(vec![n, out_h, out_w, c], out)
}

/// Resamples an `[H, W, C]` or `[N, H, W, C]` map to `target = (h, w)` with
/// half-pixel centers and edge clamping.
pub fn align_spatial(z: &LogitsMap, target: (usize, usize), method: ResampleMethod) -> Result<LogitsMap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidParameter(format!("target extent {target:?}")));
    }
    let batched = match z.ndim() {
        3 => z.reshape(&[1, z.dims()[0], z.dims()[1], z.dims()[2]])?,
        4 => z.clone(),
        _ => return shape_err(format!("align_spatial expects 3 or 4 dims, got {:?}", z.dims())),
    };
    if batched.dims()[1] == 0 || batched.dims()[2] == 0 {
        return shape_err("align_spatial on an empty map");
    }
    if batched.dims()[1] == th && batched.dims()[2] == tw {
        return Ok(z.clone());
    }
    let out = resample_nhwc(&batched, th, tw, method);
    if z.ndim() == 3 {
        out.reshape(&[th, tw, z.dims()[2]])
    } else {
        Ok(out)
    }
}

/// Differentiable bilinear resize of an NHWC variable.
pub fn resize_bilinear(tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    if d.len() != 4 || out_h == 0 || out_w == 0 || d[1] == 0 || d[2] == 0 {
        return shape_err(format!("resize_bilinear {d:?} -> {out_h}x{out_w}"));
    }
    if d[1] == out_h && d[2] == out_w {
        return Ok(x);
    }
    let value = resample_nhwc(tape.value(x), out_h, out_w, ResampleMethod::Bilinear);
    let bw: BackwardFn = Box::new(move |g, _| {
        let (n, h, w, c) = (d[0], d[1], d[2], d[3]);
        let ty = axis_table(h, out_h, ResampleMethod::Bilinear);
        let tx = axis_table(w, out_w, ResampleMethod::Bilinear);
        let gd = g.data();
        let mut dx = vec![0.0; n * h * w * c];
        for b in 0..n {
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let src = ((b * out_h + oy) * out_w + ox) * c;
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (yy, xx, wgt) in taps {
                        let dst = ((b * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            dx[dst + ch] += wgt * gd[src + ch];
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(d.clone(), dx))]
    });
    tape.record("resize_bilinear", &[x], value, Some(bw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    fn identity_projector(d: usize) -> ProjectorParams {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let mut p = ProjectorParams::from_parts(t(&[d, d], &w), Tensor::zeros(&[d])).unwrap();
        p.mode = Mode::Eval;
        p
    }

    #[test]
    fn eval_identity_reduces_to_rectifier() {
        let mut p = identity_projector(2);
        let f = t(&[1, 1, 1, 2], &[1.0, -2.0]);
        let z = project_to_logits(&f, &mut p).unwrap();
        let expected = 1.0 / (1.0 + nn::BN_EPS).sqrt();
        assert!((z.data()[0] - expected).abs() < 1e-12);
        assert!((z.data()[0] - 1.0).abs() < 1e-5);
        assert_eq!(z.data()[1], 0.0);

        let zero = project_to_logits(&Tensor::zeros(&[1, 2, 2, 2]), &mut p).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_matches_scalar_bn_oracle() {
        let w = t(&[2, 3], &[0.5, -0.2, 0.1, 0.3, 0.8, -0.4]);
        let b = t(&[2], &[0.05, -0.1]);
        let mut p = ProjectorParams::from_parts(w.clone(), b.clone()).unwrap();
        let f = t(&[1, 1, 2, 3], &[1.0, 2.0, -1.0, 0.5, -0.3, 0.7]);
        let z = project_to_logits(&f, &mut p).unwrap();
        for c in 0..2 {
            let lin: Vec<f64> = (0..2)
                .map(|px| {
                    (0..3).map(|k| f.data()[px * 3 + k] * w.data()[c * 3 + k]).sum::<f64>()
                        + b.data()[c]
                })
                .collect();
            let mean = (lin[0] + lin[1]) / 2.0;
            let var = ((lin[0] - mean).powi(2) + (lin[1] - mean).powi(2)) / 2.0;
            for px in 0..2 {
                let want = ((lin[px] - mean) / (var + nn::BN_EPS).sqrt()).max(0.0);
                assert!((z.data()[px * 2 + c] - want).abs() < 1e-10);
            }
            assert!((p.bn_running_mean[c] - 0.1 * mean).abs() < 1e-12);
            assert!((p.bn_running_var[c] - (0.9 + 0.1 * var)).abs() < 1e-12);
        }
        assert!(z.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut p = identity_projector(3);
        let f = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(project_to_logits(&f, &mut p), Err(Error::Shape(_))));
        assert!(matches!(project_features_psi(&f, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn psi_examples() {
        let p = identity_projector(3);
        let f = t(&[1, 1, 2, 3], &[0.1, -0.2, 0.3, 1.0, 2.0, -3.0]);
        assert_eq!(project_features_psi(&f, &p).unwrap(), f);

        let bias = t(&[2], &[0.5, -1.5]);
        let zero = ProjectorParams::from_parts(Tensor::zeros(&[2, 3]), bias.clone()).unwrap();
        let out = project_features_psi(&f, &zero).unwrap();
        for px in out.rows() {
            assert_eq!(px, bias.data());
        }

        let w = t(&[2, 3], &[0.3, -0.7, 1.1, 0.2, 0.4, -0.9]);
        let p = ProjectorParams::from_parts(w.clone(), Tensor::zeros(&[2])).unwrap();
        let f1 = t(&[1, 1, 1, 3], &[0.6, -1.2, 0.25]);
        let out = project_features_psi(&f1, &p).unwrap();
        for c in 0..2 {
            let want: f64 = (0..3).map(|k| w.data()[c * 3 + k] * f1.data()[k]).sum();
            assert!((out.data()[c] - want).abs() < 1e-14);
        }
    }

    /// Per-pixel bilinear sampler written from the mapping formula.
    fn reference_bilinear(src: &[Vec<f64>], out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
        let (h, w) = (src.len(), src[0].len());
        let sample = |y: f64, x: f64| {
            let y = y.max(0.0).min((h - 1) as f64);
            let x = x.max(0.0).min((w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (dy, dx) = (y - y0 as f64, x - x0 as f64);
            src[y0][x0] * (1.0 - dy) * (1.0 - dx)
                + src[y0][x1] * (1.0 - dy) * dx
                + src[y1][x0] * dy * (1.0 - dx)
                + src[y1][x1] * dy * dx
        };
        (0..out_h)
            .map(|i| {
                (0..out_w)
                    .map(|j| {
                        let y = (i as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
                        let x = (j as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
                        sample(y, x)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn bilinear_2x2_to_4x4_matches_reference() {
        let z = t(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]);
        let out = align_spatial(&z, (4, 4), ResampleMethod::Bilinear).unwrap();
        let want = reference_bilinear(&[vec![0.0, 1.0], vec![2.0, 3.0]], 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                assert!((out.at(&[i, j, 0]) - want[i][j]).abs() < 1e-10);
            }
        }
        // corners clamp to source corners
        assert_eq!(out.at(&[0, 0, 0]), 0.0);
        assert_eq!(out.at(&[3, 3, 0]), 3.0);
        assert!((out.at(&[0, 1, 0]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn same_size_and_constant_maps() {
        let z = t(&[2, 3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]);
        assert_eq!(align_spatial(&z, (2, 3), ResampleMethod::Bilinear).unwrap(), z);
        assert_eq!(align_spatial(&z, (2, 3), ResampleMethod::Nearest).unwrap(), z);
        let v = t(&[1, 1, 1], &[0.37]);
        for method in [ResampleMethod::Bilinear, ResampleMethod::Nearest] {
            for (h, w) in [(1, 1), (3, 5), (8, 8)] {
                let out = align_spatial(&v, (h, w), method).unwrap();
                assert!(out.data().iter().all(|&x| x == 0.37));
            }
        }
        assert!(matches!(
            align_spatial(&v, (0, 3), ResampleMethod::Bilinear),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn nearest_uses_floor_of_mapping() {
        let z = t(&[1, 2, 1], &[5.0, 7.0]);
        let out = align_spatial(&z, (1, 4), ResampleMethod::Nearest).unwrap();
        assert_eq!(out.data(), &[5.0, 5.0, 5.0, 7.0]);
    }

    #[test]
    fn bilinear_stays_within_source_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = Tensor::new(&[h, w, 1], data).unwrap();
            let out = align_spatial(&z, (rng.gen_range(1..12), rng.gen_range(1..12)), ResampleMethod::Bilinear)
                .unwrap();
            assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn resize_gradient_and_projector_gradient() {
        let x = Tensor::new(&[1, 2, 3, 2], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let probe = Tensor::new(&[1, 5, 4, 2], (0..40).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let err = grad_check(
            |tape, xv| {
                let p = tape.constant(probe.clone());
                let y = resize_bilinear(tape, xv, 5, 4)?;
                let sq = tape.mul(y, y)?;
                let m = tape.mul(sq, p)?;
                tape.sum(m)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        // loss composed through project_to_logits in train mode, w.r.t. the weight
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = ProjectorParams::init(2, 3, &mut rng);
        let probe = Tensor::new(&[1, 2, 3, 3], (0..18).map(|i| (i as f64 * 0.45).sin()).collect()).unwrap();
        let w0 = proj.weight().clone();
        let err = grad_check(
            |tape, wv| {
                let mut vars = proj.params.bind(tape, false);
                vars[WEIGHT] = wv;
                let f = tape.constant(x.clone());
                let (z, _) = proj.forward_logits(tape, &vars, f)?;
                let p = tape.constant(probe.clone());
                let m = tape.mul(z, p)?;
                tape.sum(m)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
