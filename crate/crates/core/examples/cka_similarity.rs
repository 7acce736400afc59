//! Representation similarity with minibatch CKA: sanity checks on synthetic
//! features, then a layer-by-layer heatmap between two untrained models.

use hetero_akd::cka::{minibatch_cka, minibatches};
use hetero_akd::config::ExperimentConfig;
use hetero_akd::models::Arch;
use hetero_akd::pipeline::{cka_dataset, cka_report, Network};
use hetero_akd::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (200, 6);
    let x = Tensor::new(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let scaled = x.map(|v| 5.0 * v);
    let noise = Tensor::new(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let batches = |t: &Tensor| minibatches(t, 10);
    println!("CKA(X, X)     = {:.6}", minibatch_cka(&batches(&x)?, &batches(&x)?)?);
    println!("CKA(X, 5X)    = {:.6}", minibatch_cka(&batches(&x)?, &batches(&scaled)?)?);
    println!("CKA(X, noise) = {:.6}", minibatch_cka(&batches(&x)?, &batches(&noise)?)?);

    let cfg = ExperimentConfig::default();
    let conv = Network::init(Arch::Conv, 16, cfg.classes, 1)?;
    let attn = Network::init(Arch::Attention, 16, cfg.classes, 2)?;
    let ds = cka_dataset(&cfg, 100)?;
    let heatmap = cka_report(&conv.model, &attn.model, &ds, cfg.cka_minibatch)?;
    println!("\nconv (rows) vs attention (columns), untrained, 100 samples:");
    print!("{}", heatmap.to_csv());
    Ok(())
}
