use rand::Rng;

use super::{add_norm, uniform, Bound, ModelParams, TapeOutput, FEATURE_STRIDE, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2dGeometry};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub(super) const TAPS: [&str; 3] = ["patch_embed", "block1", "block2"];
const MLP_RATIO: usize = 2;

pub(super) fn init(d: usize, classes: usize, rng: &mut impl Rng) -> Result<(ParamStore, ParamStore)> {
    if d == 0 {
        return Err(Error::InvalidParameter("attention depth must be positive".into()));
    }
    let k = FEATURE_STRIDE;
    let mut p = ParamStore::new();
    p.insert("patch.weight", uniform(&[k, k, IN_CHANNELS, d], k * k * IN_CHANNELS, rng));
    p.insert("patch.bias", Tensor::zeros(&[d]));
    for blk in ["block1", "block2"] {
        add_norm(&mut p, &format!("{blk}.ln1"), d);
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{blk}.attn.{w}"), uniform(&[d, d], d, rng));
        }
        add_norm(&mut p, &format!("{blk}.ln2"), d);
        p.insert(format!("{blk}.mlp.w1"), uniform(&[d, MLP_RATIO * d], d, rng));
        p.insert(format!("{blk}.mlp.b1"), Tensor::zeros(&[MLP_RATIO * d]));
        p.insert(format!("{blk}.mlp.w2"), uniform(&[MLP_RATIO * d, d], MLP_RATIO * d, rng));
        p.insert(format!("{blk}.mlp.b2"), Tensor::zeros(&[d]));
    }
    add_norm(&mut p, "final_ln", d);
    p.insert("head.weight", uniform(&[d, classes], d, rng));
    p.insert("head.bias", Tensor::zeros(&[classes]));
    Ok((p, ParamStore::new()))
}

/// `[N, T, a] x [a, b] -> [N, T, b]`.
fn token_linear(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    let flat = tape.reshape(x, &[d[0] * d[1], d[2]])?;
    let y = tape.matmul(flat, w, false, false)?;
    let out = tape.dims(w)[1];
    tape.reshape(y, &[d[0], d[1], out])
}

fn ln(tape: &mut Tape, b: &Bound<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = b.get(&format!("{prefix}.gamma"))?;
    let beta = b.get(&format!("{prefix}.beta"))?;
    nn::layer_norm(tape, x, g, beta, nn::LN_EPS)
}

fn block(tape: &mut Tape, b: &Bound<'_>, x: Var, blk: &str, d: usize) -> Result<(Var, Var)> {
    let h = ln(tape, b, x, &format!("{blk}.ln1"))?;
    let q = token_linear(tape, h, b.get(&format!("{blk}.attn.wq"))?)?;
    let k = token_linear(tape, h, b.get(&format!("{blk}.attn.wk"))?)?;
    let v = token_linear(tape, h, b.get(&format!("{blk}.attn.wv"))?)?;
    let scores = tape.bmm(q, k, true)?;
    let attn = nn::softmax_rows(tape, scores, 1.0 / (d as f64).sqrt())?;
    let ctx = tape.bmm(attn, v, false)?;
    let o = token_linear(tape, ctx, b.get(&format!("{blk}.attn.wo"))?)?;
    let x = tape.add(x, o)?;

    let h = ln(tape, b, x, &format!("{blk}.ln2"))?;
    let h = token_linear(tape, h, b.get(&format!("{blk}.mlp.w1"))?)?;
    let h = tape.add_bias(h, b.get(&format!("{blk}.mlp.b1"))?)?;
    let h = tape.relu(h)?;
    let h = token_linear(tape, h, b.get(&format!("{blk}.mlp.w2"))?)?;
    let h = tape.add_bias(h, b.get(&format!("{blk}.mlp.b2"))?)?;
    Ok((tape.add(x, h)?, attn))
}

pub(super) fn forward(model: &ModelParams, b: &Bound<'_>, tape: &mut Tape, x: Var) -> Result<TapeOutput> {
    let d = model.d;
    let geo = Conv2dGeometry::new(FEATURE_STRIDE, FEATURE_STRIDE, 0);
    let e = nn::conv2d(tape, x, b.get("patch.weight")?, geo)?;
    let e = tape.add_bias(e, b.get("patch.bias")?)?;
    let grid = tape.dims(e).to_vec();
    let tokens = tape.reshape(e, &[grid[0], grid[1] * grid[2], d])?;
    let (b1, a1) = block(tape, b, tokens, "block1", d)?;
    let (b2, a2) = block(tape, b, b1, "block2", d)?;
    let f = ln(tape, b, b2, "final_ln")?;
    let feature = tape.reshape(f, &grid)?;
    let b1_map = tape.reshape(b1, &grid)?;
    let b2_map = tape.reshape(b2, &grid)?;
    Ok(TapeOutput {
        feature,
        logits: feature,
        taps: vec![(TAPS[0], e), (TAPS[1], b1_map), (TAPS[2], b2_map)],
        attention: vec![a1, a2],
        bn_updates: Vec::new(),
    })
}
