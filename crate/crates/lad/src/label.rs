use ndarray::Array2;

use crate::error::{LadError, Result};

/// Sentinel value marking pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Per-pixel integer class indices with an ignore sentinel; the ground truth.
///
/// Every non-ignore value is strictly below `num_classes`, enforced at
/// construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    num_classes: usize,
    data: Array2<u8>,
}

impl LabelMap {
    pub fn new(num_classes: usize, data: Array2<u8>) -> Result<Self> {
        if num_classes < 1 || num_classes > usize::from(IGNORE) {
            return Err(LadError::InvalidConfig(format!(
                "num_classes must be in 1..{}, got {num_classes}",
                IGNORE
            )));
        }
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(LadError::shape("label map", "height, width >= 1", format!("{h}x{w}")));
        }
        for &v in &data {
            if v != IGNORE && usize::from(v) >= num_classes {
                return Err(LadError::InvalidLabel { value: v, num_classes });
            }
        }
        Ok(Self { num_classes, data })
    }

    /// Builds a label map from a row-major flat slice.
    pub fn from_flat(num_classes: usize, height: usize, width: usize, values: &[u8]) -> Result<Self> {
        let data = Array2::from_shape_vec((height, width), values.to_vec())
            .map_err(|e| LadError::shape("label map", format!("{height}x{width}"), e.to_string()))?;
        Self::new(num_classes, data)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[(y, x)]
    }

    /// Number of pixels not marked ignore.
    pub fn num_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }
}
