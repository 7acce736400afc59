//! Deterministic synthetic segmentation data: one geometric shape per
//! foreground class over a textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `[N, H, W, 3]`, values in `[0, 1]`.
    pub images: Tensor,
    /// `[N, H, W]` class ids.
    pub labels: LabelMap,
    pub split: Split,
    pub seed: u64,
    pub classes: usize,
}

/// Knobs of the generator; the defaults give a task the micro models learn
/// to a useful but imperfect accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeStyle {
    /// Largest per-channel deviation of a shape colour from its class colour.
    pub color_spread: f64,
    /// Amplitude of the background stripe texture.
    pub texture: f64,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    /// Smallest and largest shape radius (or half extent) as a fraction
    /// of the shorter image side.
    pub min_size: f64,
    pub max_size: f64,
    pub max_retries: usize,
    /// Weight of the class colour against a per-shape random colour.
    pub class_color_weight: f64,
}

impl Default for ShapeStyle {
    fn default() -> Self {
        Self {
            color_spread: 0.3,
            texture: 0.2,
            noise: 0.15,
            min_size: 0.1,
            max_size: 0.22,
            max_retries: 200,
            class_color_weight: 1.0,
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.5, 0.5, 0.5],
    [0.85, 0.3, 0.25],
    [0.3, 0.75, 0.35],
    [0.3, 0.35, 0.85],
    [0.85, 0.8, 0.3],
    [0.75, 0.35, 0.8],
    [0.3, 0.8, 0.8],
    [0.9, 0.6, 0.3],
];

fn class_color(class: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    PALETTE
        .get(class)
        .copied()
        .unwrap_or_else(|| [rng.gen(), rng.gen(), rng.gen()])
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    disc: bool,
    cy: f64,
    cx: f64,
    /// Radius for discs, half extents for rectangles.
    ry: f64,
    rx: f64,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        if self.disc {
            let (dy, dx) = (py - self.cy, px - self.cx);
            dy * dy + dx * dx <= self.ry * self.ry
        } else {
            (py - self.cy).abs() <= self.ry && (px - self.cx).abs() <= self.rx
        }
    }

    fn overlaps(&self, other: &Shape, margin: f64) -> bool {
        (self.cy - other.cy).abs() < self.ry + other.ry + margin && (self.cx - other.cx).abs() < self.rx + other.rx + margin
    }
}

fn place(rng: &mut ChaCha8Rng, disc: bool, h: usize, w: usize, placed: &[Shape], style: &ShapeStyle) -> Result<Shape> {
    let side = h.min(w) as f64;
    let (lo, hi) = (style.min_size * side, style.max_size * side);
    for _ in 0..style.max_retries {
        let ry = rng.gen_range(lo..=hi);
        let rx = if disc { ry } else { rng.gen_range(lo..=hi) };
        if 2.0 * ry >= h as f64 || 2.0 * rx >= w as f64 {
            continue;
        }
        let s = Shape {
            disc,
            cy: rng.gen_range(ry..h as f64 - ry),
            cx: rng.gen_range(rx..w as f64 - rx),
            ry,
            rx,
        };
        if placed.iter().all(|p| !s.overlaps(p, 1.0)) {
            return Ok(s);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} non-overlapping shapes in a {h}x{w} image after {} retries",
        placed.len() + 1,
        style.max_retries
    )))
}

pub fn gen_synthetic(seed: u64, n_samples: usize, h: usize, w: usize, classes: usize) -> Result<SyntheticDataset> {
    gen_synthetic_with(seed, n_samples, h, w, classes, Split::Train, &ShapeStyle::default())
}

pub fn gen_synthetic_with(
    seed: u64,
    n_samples: usize,
    h: usize,
    w: usize,
    classes: usize,
    split: Split,
    style: &ShapeStyle,
) -> Result<SyntheticDataset> {
    if !(2..=255).contains(&classes) {
        return Err(Error::InvalidParameter(format!("class count must lie in [2, 255], got {classes}")));
    }
    if h == 0 || w == 0 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(Error::InvalidParameter(format!("image size {h}x{w} must be positive multiples of 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors: Vec<[f64; 3]> = (0..classes).map(|c| class_color(c, &mut rng)).collect();
    let mut images = vec![0.0; n_samples * h * w * 3];
    let mut labels = vec![0u8; n_samples * h * w];
    for s in 0..n_samples {
        let img = &mut images[s * h * w * 3..(s + 1) * h * w * 3];
        let lab = &mut labels[s * h * w..(s + 1) * h * w];
        let bg: Vec<f64> = colors[0].iter().map(|c| c + rng.gen_range(-0.25..0.25)).collect();
        let (fy, fx) = (rng.gen_range(0.2..1.2), rng.gen_range(0.2..1.2));
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let t = style.texture * (fy * y as f64 + fx * x as f64 + phase).sin();
                for ch in 0..3 {
                    img[(y * w + x) * 3 + ch] = bg[ch] + t;
                }
            }
        }
        let mut placed: Vec<Shape> = Vec::with_capacity(classes - 1);
        for class in 1..classes {
            let disc = class % 2 == 1;
            let shape = place(&mut rng, disc, h, w, &placed, style)?;
            placed.push(shape);
            let a = style.class_color_weight;
            let col: Vec<f64> = colors[class]
                .iter()
                .map(|c| {
                    let random: f64 = rng.gen();
                    a * c + (1.0 - a) * random + rng.gen_range(-style.color_spread..=style.color_spread)
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(y, x) {
                        lab[y * w + x] = class as u8;
                        img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&col);
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v + rng.gen_range(-style.noise..=style.noise)).clamp(0.0, 1.0);
        }
    }
    Ok(SyntheticDataset {
        images: Tensor::new(&[n_samples, h, w, 3], images)?,
        labels: LabelMap::new(&[n_samples, h, w], labels)?,
        split,
        seed,
        classes,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.images.dims()[2]
    }

    /// Gathers samples `indices`, mirroring sample `i` horizontally when
    /// `flips[i]` is set.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> Result<(Tensor, LabelMap)> {
        if flips.len() != indices.len() {
            return Err(Error::Contract("one flip flag per batch index".into()));
        }
        let (h, w) = (self.height(), self.width());
        let (img_len, lab_len) = (h * w * 3, h * w);
        let mut images = Vec::with_capacity(indices.len() * img_len);
        let mut labels = Vec::with_capacity(indices.len() * lab_len);
        for (&i, &flip) in indices.iter().zip(flips) {
            if i >= self.len() {
                return Err(Error::InvalidInput(format!("sample {i} out of range")));
            }
            let img = &self.images.data()[i * img_len..(i + 1) * img_len];
            let lab = &self.labels.data()[i * lab_len..(i + 1) * lab_len];
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    images.extend_from_slice(&img[(y * w + sx) * 3..(y * w + sx) * 3 + 3]);
                    labels.push(lab[y * w + sx]);
                }
            }
        }
        Ok((
            Tensor::new(&[indices.len(), h, w, 3], images)?,
            LabelMap::new(&[indices.len(), h, w], labels)?,
        ))
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<SyntheticDataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx, &vec![false; n])?;
        Ok(SyntheticDataset {
            images,
            labels,
            ..self.clone()
        })
    }
}
