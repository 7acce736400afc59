//! Temperature softmax, KL divergence and a finite-difference check of the
//! logits distillation gradient recorded on the tape.

use hetero_akd::gradcheck::grad_check;
use hetero_akd::losses::{kd_loss_var, KdDirection};
use hetero_akd::prob::{kl_divergence, softmax_temperature};
use hetero_akd::{Result, Tensor};

fn main() -> Result<()> {
    let z = Tensor::new(&[1, 3], vec![2.0, 1.0, 0.1])?;
    for tau in [0.5, 1.0, 4.0] {
        println!("softmax(z / {tau}) = {:?}", softmax_temperature(&z, tau)?.data());
    }

    let p = [0.7, 0.2, 0.1];
    let q = [0.5, 0.3, 0.2];
    println!("KL(p || q) = {:.6}", kl_divergence(&p, &q)?);
    println!("KL(p || p) = {:.6}", kl_divergence(&p, &p)?);

    // Student logits on a 1x2x2 map with 3 classes; the teacher is fixed.
    let z_s = Tensor::new(&[1, 2, 2, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let z_t = Tensor::new(&[1, 2, 2, 3], (0..12).map(|i| (i as f64 * 0.91).cos()).collect())?;
    let err = grad_check(
        |tape, x| kd_loss_var(tape, x, &z_t, 2.0, KdDirection::TeacherToStudent, None),
        &z_s,
        1e-5,
    )?;
    println!("kd loss gradient: max relative error vs central differences = {err:.2e}");
    Ok(())
}
