use crate::error::{shape_err, Error, Result};

/// Label value excluded from every reduction.
pub const IGNORE_LABEL: u8 = 255;

/// Integer class ids over a `[N, H, W]` (or `[H, W]`) grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: &[usize], data: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return shape_err(format!("label dims {dims:?} vs {} values", data.len()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Every non-ignore label must lie in `[0, classes)`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= classes)
        {
            Some(&label) => Err(Error::InvalidLabel { label, classes }),
            None => Ok(()),
        }
    }

    pub fn valid_pixels(&self) -> usize {
        self.data.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    /// Checks that the label grid matches the spatial extent of an NHWC map
    /// with dims `map_dims`.
    pub fn expect_matches(&self, map_dims: &[usize]) -> Result<()> {
        let spatial = &map_dims[..map_dims.len().saturating_sub(1)];
        if spatial != self.dims.as_slice() {
            return shape_err(format!(
                "labels {:?} do not match map {:?}",
                self.dims, map_dims
            ));
        }
        Ok(())
    }
}

/// `true` for every pixel that takes part in a reduction; all pixels when no
/// label map is supplied.
pub(crate) fn keep_mask(pixels: usize, mask: Option<&LabelMap>) -> Result<Vec<bool>> {
    match mask {
        Some(y) => {
            if y.len() != pixels {
                return shape_err(format!("mask has {} pixels, maps have {pixels}", y.len()));
            }
            Ok(y.data().iter().map(|&l| l != IGNORE_LABEL).collect())
        }
        None => Ok(vec![true; pixels]),
    }
}
