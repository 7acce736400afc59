//! The two micro segmentation networks: parameter inventory, output shapes
//! and attention maps.

use hetero_akd::models::{Arch, ModelParams};
use hetero_akd::projection::Mode;
use hetero_akd::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let images = Tensor::new(&[2, 16, 16, 3], (0..2 * 16 * 16 * 3).map(|i| (i % 17) as f64 / 17.0).collect())?;
    for arch in [Arch::Conv, Arch::Attention] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ModelParams::init(arch, 16, 3, &mut rng)?;
        println!("{arch}: {} parameter tensors, {} scalars", model.params.len(), model.params.num_scalars());
        for (name, t) in model.params.iter().take(4) {
            println!("  {name:<22} {:?}", t.dims());
        }
        let out = model.forward(&images, Mode::Eval)?;
        println!("  last feature {:?}, logits {:?}", out.last_feature.dims(), out.out_logits.dims());
        for (name, t) in &out.taps {
            println!("  tap {name:<12} {:?}", t.dims());
        }
        if let Some(a) = out.attention.first() {
            let row: f64 = a.data()[..a.last_dim()].iter().sum();
            println!("  attention map {:?}, first row sums to {row:.12}", a.dims());
        }
        let pred = model.predict(&images)?;
        println!("  {} predicted pixels", pred.len());
    }
    Ok(())
}
