//! The loss terms of a distillation step and how they combine.

use hetero_akd::losses::{fd_loss, kd_loss, task_loss, total_loss, DistillConfig, KdDirection};
use hetero_akd::mechanisms::{hakd_loss, TeachingSignals};
use hetero_akd::projection::ProjectorParams;
use hetero_akd::{LabelMap, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w, c) = (4, 4, 3);
    let z_t = random(&mut rng, &[1, h, w, c], 3.0)?;
    let z_s = random(&mut rng, &[1, h, w, c], 1.0)?;
    let y = LabelMap::new(&[1, h, w], (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect())?;

    let cfg = DistillConfig::default();
    let task = task_loss(&z_s, &y)?;
    let kd = kd_loss(&z_s, &z_t, cfg.tau, cfg.kd_direction, Some(&y))?;
    let kd_rev = kd_loss(&z_s, &z_t, cfg.tau, KdDirection::StudentToTeacher, Some(&y))?;
    let sig = TeachingSignals::compute(&z_t, &z_s, &y)?;
    let hakd = hakd_loss(&sig.hybrid, &z_s, &sig.weights, cfg.tau, Some(&y))?;

    println!("task cross-entropy        {task:.6}");
    println!("kd  teacher-to-student    {kd:.6}");
    println!("kd  student-to-teacher    {kd_rev:.6}");
    println!("reweighted hybrid term    {hakd:.6}");
    println!(
        "total (lambda1={}, lambda2={}) = {:.6}",
        cfg.lambda1,
        cfg.lambda2,
        total_loss(task, kd, hakd, &cfg)?
    );
    let conv = DistillConfig::conv_teacher();
    println!(
        "total with the conv-teacher preset (tau={}, lambda2={}) = {:.6}",
        conv.tau,
        conv.lambda2,
        total_loss(task, kd, hakd, &conv)?
    );

    // Feature regression through a linear projector from depth 4 to 6.
    let f_s = random(&mut rng, &[1, 2, 2, 4], 1.0)?;
    let f_t = random(&mut rng, &[1, 2, 2, 6], 1.0)?;
    let psi = ProjectorParams::init(4, 6, &mut rng);
    println!("feature regression loss   {:.6}", fd_loss(&f_t, &f_s, &psi)?);
    Ok(())
}
