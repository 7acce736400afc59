//! Mapping backbone features into the class-logits space and resampling the
//! result to label resolution.

use hetero_akd::projection::{align_spatial, project_to_logits, Mode, ProjectorParams, ResampleMethod};
use hetero_akd::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, classes) = (8, 3);
    let features = Tensor::new(&[2, 4, 4, d], (0..2 * 4 * 4 * d).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect())?;

    let mut projector = ProjectorParams::init(d, classes, &mut rng);
    let z = project_to_logits(&features, &mut projector)?;
    println!("train mode: {:?} -> logits {:?}", features.dims(), z.dims());
    println!("running mean after one batch: {:?}", projector.bn_running_mean);

    projector.mode = Mode::Eval;
    let z = project_to_logits(&features, &mut projector)?;
    println!("eval mode min logit {:.4} (rectified)", z.data().iter().cloned().fold(f64::INFINITY, f64::min));

    for method in [ResampleMethod::Bilinear, ResampleMethod::Nearest] {
        let up = align_spatial(&z, (16, 16), method)?;
        println!("{method:?} upsample to {:?}, corner value {:.4}", up.dims(), up.at(&[0, 0, 0, 0]));
    }
    Ok(())
}
