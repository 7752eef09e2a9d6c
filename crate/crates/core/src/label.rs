//! Integer label rasters.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return invalid(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn same_dims(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Per-pixel argmax over the last axis of an `H x W x K` map.
    /// Ties resolve to the lowest class index.
    pub fn argmax(scores: &Tensor) -> Result<Self> {
        let (h, w, k) = scores.hwc()?;
        if k == 0 || k > 255 {
            return invalid(format!("argmax over {k} classes"));
        }
        let data = scores
            .data()
            .chunks_exact(k)
            .map(|row| argmax_row(row) as u8)
            .collect();
        Self::new(h, w, data)
    }

    /// Number of pixels equal to `value`.
    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }
}

pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::zeros(&[2, 2, 3]);
        let m = LabelMap::argmax(&t).unwrap();
        assert!(m.data.iter().all(|&v| v == 0));
        let t = Tensor::new(vec![1, 1, 3], vec![0.2, 0.5, 0.5]).unwrap();
        assert_eq!(LabelMap::argmax(&t).unwrap().data, vec![1]);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }
}
