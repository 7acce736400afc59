use rand::Rng;

use super::{add_norm, add_running, uniform, Bound, ModelParams, TapeOutput, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2dGeometry, Normalize};
use crate::params::ParamStore;
use crate::projection::Mode;
use crate::tape::{Tape, Var};

pub(super) const TAPS: [&str; 3] = ["stem", "block1", "block2"];

fn add_conv(p: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, rng: &mut impl Rng) {
    p.insert(name, uniform(&[k, k, cin, cout], k * k * cin, rng));
}

pub(super) fn init(d: usize, classes: usize, rng: &mut impl Rng) -> Result<(ParamStore, ParamStore)> {
    if d < 4 || !d.is_multiple_of(4) {
        return Err(Error::InvalidParameter(format!("conv depth must be a positive multiple of 4, got {d}")));
    }
    let mut p = ParamStore::new();
    let mut b = ParamStore::new();
    let widths = [d / 4, d / 2, d];
    add_conv(&mut p, "stem.conv", 3, IN_CHANNELS, widths[0], rng);
    add_norm(&mut p, "stem.bn", widths[0]);
    add_running(&mut b, "stem.bn", widths[0]);
    for (i, blk) in ["block1", "block2"].iter().enumerate() {
        let (cin, cout) = (widths[i], widths[i + 1]);
        add_conv(&mut p, &format!("{blk}.conv1"), 3, cin, cout, rng);
        add_norm(&mut p, &format!("{blk}.bn1"), cout);
        add_conv(&mut p, &format!("{blk}.conv2"), 3, cout, cout, rng);
        add_norm(&mut p, &format!("{blk}.bn2"), cout);
        add_conv(&mut p, &format!("{blk}.skip"), 1, cin, cout, rng);
        add_running(&mut b, &format!("{blk}.bn1"), cout);
        add_running(&mut b, &format!("{blk}.bn2"), cout);
    }
    p.insert("head.weight", uniform(&[d, classes], d, rng));
    p.insert("head.bias", crate::tensor::Tensor::zeros(&[classes]));
    Ok((p, b))
}

struct Ctx<'a, 'b> {
    model: &'a ModelParams,
    bound: &'a Bound<'b>,
    mode: Mode,
    updates: Vec<(String, nn::BatchStats)>,
}

impl Ctx<'_, '_> {
    fn bn(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.bound.get(&format!("{prefix}.gamma"))?;
        let beta = self.bound.get(&format!("{prefix}.beta"))?;
        let stats = match self.mode {
            Mode::Train => Normalize::Batch,
            Mode::Eval => {
                let (mean, var) = self.model.running(prefix)?;
                Normalize::Running { mean, var }
            }
        };
        let (y, batch) = nn::batch_norm(tape, x, gamma, beta, stats, nn::BN_EPS)?;
        if let Some(s) = batch {
            self.updates.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, geo: Conv2dGeometry) -> Result<Var> {
        nn::conv2d(tape, x, self.bound.get(name)?, geo)
    }

    fn block(&mut self, tape: &mut Tape, x: Var, blk: &str) -> Result<Var> {
        let down = Conv2dGeometry::new(3, 2, 1);
        let same = Conv2dGeometry::new(3, 1, 1);
        let h = self.conv(tape, x, &format!("{blk}.conv1"), down)?;
        let h = self.bn(tape, h, &format!("{blk}.bn1"))?;
        let h = tape.relu(h)?;
        let h = self.conv(tape, h, &format!("{blk}.conv2"), same)?;
        let h = self.bn(tape, h, &format!("{blk}.bn2"))?;
        let skip = self.conv(tape, x, &format!("{blk}.skip"), Conv2dGeometry::new(1, 2, 0))?;
        let y = tape.add(h, skip)?;
        tape.relu(y)
    }
}

pub(super) fn forward(model: &ModelParams, bound: &Bound<'_>, tape: &mut Tape, x: Var, mode: Mode) -> Result<TapeOutput> {
    let mut ctx = Ctx {
        model,
        bound,
        mode,
        updates: Vec::new(),
    };
    let s = ctx.conv(tape, x, "stem.conv", Conv2dGeometry::new(3, 1, 1))?;
    let s = ctx.bn(tape, s, "stem.bn")?;
    let stem = tape.relu(s)?;
    let b1 = ctx.block(tape, stem, "block1")?;
    let b2 = ctx.block(tape, b1, "block2")?;
    Ok(TapeOutput {
        feature: b2,
        logits: b2,
        taps: vec![(TAPS[0], stem), (TAPS[1], b1), (TAPS[2], b2)],
        attention: Vec::new(),
        bn_updates: ctx.updates,
    })
}
