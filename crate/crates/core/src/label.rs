use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel class indices, row-major. Class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize) -> Self {
        LabelMap {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w, "label data length");
        LabelMap { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    /// Checks every value is below `k`, naming the first offending pixel.
    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v as usize >= k) {
            return Err(Error::Validation(format!(
                "label value {} at (row {}, col {}) is not below K={k}",
                self.data[i],
                i / self.w,
                i % self.w
            )));
        }
        Ok(())
    }

    pub fn histogram(&self, k: usize) -> Vec<u64> {
        let mut h = vec![0u64; k];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}
