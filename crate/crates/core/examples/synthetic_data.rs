//! The synthetic segmentation task: shapes of one class each over a
//! striped background, rendered here as text.

use hetero_akd::data::{gen_synthetic, gen_synthetic_with, ShapeStyle, Split};
use hetero_akd::Result;

fn main() -> Result<()> {
    let ds = gen_synthetic(42, 4, 32, 32, 3)?;
    println!("images {:?}, labels {:?}", ds.images.dims(), ds.labels.dims());
    let (h, w) = (ds.height(), ds.width());
    for y in (0..h).step_by(2) {
        let line: String = (0..w).map(|x| [' ', 'o', '#'][ds.labels.data()[y * w + x] as usize]).collect();
        println!("|{line}|");
    }
    let mut counts = [0usize; 3];
    for &l in ds.labels.data() {
        counts[l as usize] += 1;
    }
    println!("pixel counts per class over 4 images: {counts:?}");

    let crowded = ShapeStyle {
        min_size: 0.4,
        max_size: 0.45,
        max_retries: 10,
        ..Default::default()
    };
    if let Err(e) = gen_synthetic_with(1, 1, 16, 16, 8, Split::Train, &crowded) {
        println!("over-full layout: {e}");
    }
    Ok(())
}
