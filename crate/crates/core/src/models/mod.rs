//! Two small segmentation networks with different inductive biases.
//!
//! Both map `[N, H, W, 3]` images to a `d`-channel feature map at `H/4 x W/4`
//! (the distillation tap) and to class logits at input resolution through a
//! 1x1 head and bilinear upsampling.

mod attention;
mod conv;

use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, BatchStats};
use crate::params::ParamStore;
use crate::projection::{resize_bilinear, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Input channel count for every model.
pub const IN_CHANNELS: usize = 3;
/// Spatial reduction between input and feature map.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Conv,
    Attention,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Conv => "conv",
            Arch::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv" => Some(Arch::Conv),
            "attention" => Some(Arch::Attention),
            _ => None,
        }
    }

    /// Names of the intermediate layers exposed for similarity analysis.
    pub fn tap_names(self) -> [&'static str; 3] {
        match self {
            Arch::Conv => conv::TAPS,
            Arch::Attention => attention::TAPS,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Trainable parameters plus non-trainable buffers (normalization running
/// statistics) of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub d: usize,
    pub classes: usize,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

/// Per-sample values of a forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub last_feature: Tensor,
    pub out_logits: Tensor,
    pub taps: Vec<(&'static str, Tensor)>,
    /// Attention probabilities `[N, T, T]` per encoder block (attention
    /// models only).
    pub attention: Vec<Tensor>,
}

/// Forward pass recorded on a tape.
#[derive(Debug)]
pub struct TapeOutput {
    pub feature: Var,
    pub logits: Var,
    pub taps: Vec<(&'static str, Var)>,
    pub attention: Vec<Var>,
    /// Batch statistics of every batch-norm layer, keyed by layer prefix, in
    /// train mode.
    pub bn_updates: Vec<(String, BatchStats)>,
}

pub(crate) fn uniform(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = dims.iter().product();
    Tensor::from_parts(dims.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

pub(crate) fn add_norm(params: &mut ParamStore, prefix: &str, c: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
}

pub(crate) fn add_running(buffers: &mut ParamStore, prefix: &str, c: usize) {
    buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    buffers.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
}

/// Looks up bound variables by parameter name.
pub(crate) struct Bound<'a> {
    params: &'a ParamStore,
    vars: &'a [Var],
}

impl Bound<'_> {
    pub(crate) fn get(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.params.index_of(name)?])
    }
}

impl ModelParams {
    pub fn init(arch: Arch, d: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 classes, got {classes}")));
        }
        let (params, buffers) = match arch {
            Arch::Conv => conv::init(d, classes, rng)?,
            Arch::Attention => attention::init(d, classes, rng)?,
        };
        Ok(Self {
            arch,
            d,
            classes,
            params,
            buffers,
        })
    }

    /// The parameter names `arch` with depth `d` must carry, in order.
    pub fn expected_names(arch: Arch, d: usize, classes: usize) -> Result<(Vec<String>, Vec<String>)> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let m = Self::init(arch, d, classes, &mut rng)?;
        Ok((m.params.names().to_vec(), m.buffers.names().to_vec()))
    }

    pub fn check_images(&self, dims: &[usize]) -> Result<()> {
        match dims {
            &[_, h, w, c] if c == IN_CHANNELS && h % FEATURE_STRIDE == 0 && w % FEATURE_STRIDE == 0 && h > 0 && w > 0 => Ok(()),
            _ => shape_err(format!(
                "images must be [N, H, W, 3] with H and W positive multiples of 4, got {dims:?}"
            )),
        }
    }

    /// Records the forward pass. `vars` come from binding [`Self::params`].
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], images: Var, mode: Mode) -> Result<TapeOutput> {
        let dims = tape.dims(images).to_vec();
        self.check_images(&dims)?;
        let bound = Bound {
            params: &self.params,
            vars,
        };
        let mut out = match self.arch {
            Arch::Conv => conv::forward(self, &bound, tape, images, mode)?,
            Arch::Attention => attention::forward(self, &bound, tape, images)?,
        };
        let fd = tape.dims(out.feature).to_vec();
        let rows = fd[0] * fd[1] * fd[2];
        let flat = tape.reshape(out.feature, &[rows, self.d])?;
        let z = tape.matmul(flat, bound.get("head.weight")?, false, false)?;
        let z = tape.add_bias(z, bound.get("head.bias")?)?;
        let z = tape.reshape(z, &[fd[0], fd[1], fd[2], self.classes])?;
        out.logits = resize_bilinear(tape, z, dims[1], dims[2])?;
        Ok(out)
    }

    /// Value-only forward pass. Train mode normalizes with batch statistics
    /// but does not touch the running buffers.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward_tape(&mut tape, &vars, x, mode)?;
        Ok(ModelOutput {
            last_feature: tape.value(out.feature).clone(),
            out_logits: tape.value(out.logits).clone(),
            taps: out.taps.iter().map(|&(n, v)| (n, tape.value(v).clone())).collect(),
            attention: out.attention.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Per-pixel argmax of eval-mode logits, `[N, H, W]`.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<u8>> {
        let out = self.forward(images, Mode::Eval)?;
        Ok(out
            .out_logits
            .rows()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect())
    }

    /// Folds batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            let mi = self.buffers.index_of(&format!("{prefix}.running_mean"))?;
            let vi = self.buffers.index_of(&format!("{prefix}.running_var"))?;
            let (lo, hi) = self.buffers.tensors_mut().split_at_mut(vi.max(mi));
            let (m, v) = if mi < vi { (&mut lo[mi], &mut hi[0]) } else { (&mut hi[0], &mut lo[vi]) };
            nn::update_running(m.data_mut(), v.data_mut(), stats, nn::BN_MOMENTUM);
        }
        Ok(())
    }

    pub fn running(&self, prefix: &str) -> Result<(&[f64], &[f64])> {
        Ok((
            self.buffers.get(&format!("{prefix}.running_mean"))?.data(),
            self.buffers.get(&format!("{prefix}.running_var"))?.data(),
        ))
    }
}
