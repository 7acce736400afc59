//! Minibatch centered kernel alignment with the unbiased HSIC estimator.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Default number of samples drawn for an analysis run.
pub const DEFAULT_SAMPLES: usize = 500;
/// Default minibatch size.
pub const DEFAULT_MINIBATCH: usize = 10;
/// Smallest minibatch for which the unbiased estimator is defined.
pub const MIN_MINIBATCH: usize = 4;

/// Linear-kernel Gram matrix `X Xᵀ` of an `n x d` matrix.
pub fn gram(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || x.dims()[0] == 0 || x.dims()[1] == 0 {
        return shape_err(format!("gram expects a non-empty n x d matrix, got {:?}", x.dims()));
    }
    let (n, d) = (x.dims()[0], x.dims()[1]);
    let mut k = vec![0.0; n * n];
    gemm(n, d, n, x.data(), false, x.data(), true, &mut k, false);
    // Exact symmetry regardless of the kernel's summation order.
    for i in 0..n {
        for j in i + 1..n {
            let v = k[i * n + j];
            k[j * n + i] = v;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], k))
}

fn square_dim(k: &Tensor) -> Result<usize> {
    match k.dims() {
        [a, b] if a == b => Ok(*a),
        d => shape_err(format!("expected a square matrix, got {d:?}")),
    }
}

/// Unbiased HSIC estimate from two `n x n` Gram matrices, `n >= 4`.
pub fn hsic_unbiased(k: &Tensor, l: &Tensor) -> Result<f64> {
    let n = square_dim(k)?;
    if square_dim(l)? != n {
        return shape_err(format!("gram sizes differ: {:?} vs {:?}", k.dims(), l.dims()));
    }
    if n < MIN_MINIBATCH {
        return Err(Error::InvalidParameter(format!("unbiased HSIC needs n >= 4, got {n}")));
    }
    let (kd, ld) = (k.data(), l.data());
    let mut trace = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        let mut row_k = 0.0;
        let mut row_l = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (kd[i * n + j], ld[i * n + j]);
            trace += a * ld[j * n + i];
            row_k += a;
            row_l += b;
        }
        sum_k += row_k;
        sum_l += row_l;
        // 1ᵀ K̃ L̃ 1 = sum_j (column sums of K̃)_j (row sums of L̃)_j; both
        // matrices are symmetric so row sums suffice.
        cross += row_k * row_l;
    }
    let nf = n as f64;
    let value = (trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross) / (nf * (nf - 3.0));
    Ok(value)
}

/// Subtracts each column's mean. The unbiased estimator is unchanged by
/// this shift; it only removes cancellation error, so constant features
/// give an exactly zero self-HSIC.
fn center_columns(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || x.dims()[0] == 0 {
        return shape_err(format!("expected a non-empty n x d matrix, got {:?}", x.dims()));
    }
    let (n, d) = (x.dims()[0], x.dims()[1]);
    let mut mean = vec![0.0; d];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    x.zip_map(&Tensor::from_parts(vec![n, d], mean.repeat(n)), |a, b| a - b)
}

/// Running sums of the three HSIC terms over paired minibatches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CkaAccumulator {
    pub hsic_xy_sum: f64,
    pub hsic_xx_sum: f64,
    pub hsic_yy_sum: f64,
    pub k: usize,
    pub n: usize,
}

impl CkaAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one pair of minibatches (`n x d1` and `n x d2`, same samples).
    pub fn update(&mut self, x: &Tensor, y: &Tensor) -> Result<()> {
        let kx = gram(&center_columns(x)?)?;
        let ly = gram(&center_columns(y)?)?;
        self.update_grams(&kx, &ly)
    }

    pub fn update_grams(&mut self, kx: &Tensor, ly: &Tensor) -> Result<()> {
        let n = square_dim(kx)?;
        if self.k > 0 && n != self.n {
            return shape_err(format!("minibatch size changed from {} to {n}", self.n));
        }
        let xy = hsic_unbiased(kx, ly)?;
        let xx = hsic_unbiased(kx, kx)?;
        let yy = hsic_unbiased(ly, ly)?;
        if !(xy.is_finite() && xx.is_finite() && yy.is_finite()) {
            return Err(Error::NonFinite("HSIC partial sum".into()));
        }
        self.hsic_xy_sum += xy;
        self.hsic_xx_sum += xx;
        self.hsic_yy_sum += yy;
        self.n = n;
        self.k += 1;
        Ok(())
    }

    pub fn finalize(&self) -> Result<f64> {
        if self.k == 0 {
            return Err(Error::InvalidInput("no minibatches accumulated".into()));
        }
        let kf = self.k as f64;
        let (xy, xx, yy) = (self.hsic_xy_sum / kf, self.hsic_xx_sum / kf, self.hsic_yy_sum / kf);
        if xx <= 0.0 || yy <= 0.0 {
            return Err(Error::DegenerateInput(format!(
                "mean self-HSIC is not positive ({xx:.3e}, {yy:.3e})"
            )));
        }
        Ok(xy / (xx.sqrt() * yy.sqrt()))
    }
}

/// CKA between two paired streams of minibatches.
pub fn minibatch_cka(stream_x: &[Tensor], stream_y: &[Tensor]) -> Result<f64> {
    if stream_x.len() != stream_y.len() {
        return shape_err(format!("stream lengths differ: {} vs {}", stream_x.len(), stream_y.len()));
    }
    let mut acc = CkaAccumulator::new();
    for (x, y) in stream_x.iter().zip(stream_y) {
        if x.dims().first() != y.dims().first() {
            return shape_err("paired minibatches hold different sample counts");
        }
        acc.update(x, y)?;
    }
    acc.finalize()
}

/// Layer-by-layer CKA matrix; `None` marks a degenerate cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaHeatmap {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// One feature stream per named layer.
pub type LayerStreams = Vec<(String, Vec<Tensor>)>;

pub fn cka_heatmap(model_a: &LayerStreams, model_b: &LayerStreams) -> Result<CkaHeatmap> {
    // Gram matrices are shared between all cells of a row or column.
    let grams = |layers: &LayerStreams| -> Result<Vec<Vec<Tensor>>> {
        layers
            .iter()
            .map(|(_, s)| s.iter().map(|x| gram(&center_columns(x)?)).collect())
            .collect()
    };
    let ga = grams(model_a)?;
    let gb = grams(model_b)?;
    let mut values = Vec::with_capacity(ga.len());
    for a in &ga {
        let mut row = Vec::with_capacity(gb.len());
        for b in &gb {
            if a.len() != b.len() {
                return shape_err("layer streams hold different minibatch counts");
            }
            let mut acc = CkaAccumulator::new();
            for (k, l) in a.iter().zip(b) {
                acc.update_grams(k, l)?;
            }
            row.push(match acc.finalize() {
                Ok(v) => Some(v),
                Err(Error::DegenerateInput(_)) => None,
                Err(e) => return Err(e),
            });
        }
        values.push(row);
    }
    Ok(CkaHeatmap {
        rows: model_a.iter().map(|(n, _)| n.clone()).collect(),
        cols: model_b.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

impl CkaHeatmap {
    /// CSV with a header row of column layer names and one row per layer of
    /// the first model. Degenerate cells are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for c in &self.cols {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (name, row) in self.rows.iter().zip(&self.values) {
            s.push_str(name);
            for v in row {
                s.push(',');
                if let Some(v) = v {
                    let _ = write!(s, "{v:.16e}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Global average pooling of `[n, H, W, d]` (or already pooled `[n, d]`)
/// features to an `n x d` matrix.
pub fn pool_features(f: &Tensor) -> Result<Tensor> {
    match f.dims() {
        [_, _] => Ok(f.clone()),
        &[n, h, w, d] => {
            let hw = h * w;
            if hw == 0 {
                return shape_err("cannot pool an empty spatial grid");
            }
            let mut out = vec![0.0; n * d];
            for (sample, o) in f.data().chunks(hw * d).zip(out.chunks_mut(d)) {
                for px in sample.chunks(d) {
                    for (acc, v) in o.iter_mut().zip(px) {
                        *acc += v;
                    }
                }
                for v in o.iter_mut() {
                    *v /= hw as f64;
                }
            }
            Ok(Tensor::from_parts(vec![n, d], out))
        }
        d => shape_err(format!("features must be n x d or n x H x W x d, got {d:?}")),
    }
}

/// Splits pooled `n_total x d` features into consecutive minibatches of
/// size `n`; a trailing partial minibatch is dropped.
pub fn minibatches(pooled: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    if pooled.ndim() != 2 {
        return shape_err("minibatches expects an n x d matrix");
    }
    if n < MIN_MINIBATCH {
        return Err(Error::InvalidParameter(format!("minibatch size must be >= 4, got {n}")));
    }
    let d = pooled.dims()[1];
    Ok(pooled
        .data()
        .chunks_exact(n * d)
        .map(|c| Tensor::from_parts(vec![n, d], c.to_vec()))
        .collect())
}
