//! Teaching signals for a handful of pixels: reliability of teacher and
//! student, the mixing weight, the hybrid logits and the channel weights.

use hetero_akd::mechanisms::{hakd_loss, TeachingSignals};
use hetero_akd::{LabelMap, Result, Tensor, IGNORE_LABEL};

fn main() -> Result<()> {
    // Four pixels, three classes. Pixel 0: teacher confident and right.
    // Pixel 1: student right, teacher wrong. Pixel 2: both unsure.
    // Pixel 3: ignored.
    let z_t = Tensor::new(&[1, 1, 4, 3], vec![6.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.5, 0.4, 0.3, 3.0, 3.0, 3.0])?;
    let z_s = Tensor::new(&[1, 1, 4, 3], vec![1.0, 0.5, 0.0, 0.0, 0.0, 5.0, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0])?;
    let y = LabelMap::new(&[1, 1, 4], vec![0, 2, 1, IGNORE_LABEL])?;

    let sig = TeachingSignals::compute(&z_t, &z_s, &y)?;
    let c = 3;
    for px in 0..4 {
        let row = |t: &Tensor| t.data()[px * c..(px + 1) * c].iter().map(|v| format!("{v:7.3}")).collect::<Vec<_>>().join(" ");
        println!("pixel {px} (label {})", y.data()[px]);
        println!("  teacher reliability {}", row(&sig.h_teacher));
        println!("  student reliability {}", row(&sig.h_student));
        println!("  mix weight S        {}", row(&sig.mix));
        println!("  hybrid logits       {}", row(&sig.hybrid));
        println!("  importance          {}", row(&sig.importance));
        println!("  channel weights     {}", row(&sig.weights));
    }
    let loss = hakd_loss(&sig.hybrid, &z_s, &sig.weights, 1.0, Some(&y))?;
    println!("reweighted distillation loss: {loss:.6}");
    Ok(())
}
