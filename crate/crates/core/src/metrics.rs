//! Confusion matrices and mean intersection-over-union.
//!
//! A class with no ground-truth and no predicted pixels scores IoU 0 and
//! still counts toward the class total, so the mean always divides by K.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Elementwise sum; used to pool confusions over a split.
    pub fn accumulate(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Validation(format!(
                "cannot add K={} confusion to K={}",
                other.k, self.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn per_class_iou(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| {
                let tp = self.get(i, i);
                let row: u64 = (0..self.k).map(|j| self.get(i, j)).sum();
                let col: u64 = (0..self.k).map(|j| self.get(j, i)).sum();
                let denom = row + col - tp;
                if denom == 0 {
                    0.0
                } else {
                    tp as f64 / denom as f64
                }
            })
            .collect()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        correct as f64 / self.total().max(1) as f64
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<ConfusionMatrix> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::Validation(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    pred.validate(k)
        .map_err(|e| Error::Validation(format!("prediction: {e}")))?;
    gt.validate(k)
        .map_err(|e| Error::Validation(format!("ground truth: {e}")))?;
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        cm.counts[g as usize * k + p as usize] += 1;
    }
    Ok(cm)
}

pub fn miou(cm: &ConfusionMatrix) -> f64 {
    cm.per_class_iou().iter().sum::<f64>() / cm.k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_two_by_two() {
        let pred = LabelMap::from_vec(2, 2, vec![0, 1, 1, 1]);
        let gt = LabelMap::from_vec(2, 2, vec![0, 1, 0, 1]);
        let cm = confusion(&pred, &gt, 2).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 2]);
        assert!((miou(&cm) - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = LabelMap::from_vec(3, 3, vec![0, 1, 2, 2, 1, 0, 0, 0, 1]);
        let cm = confusion(&gt, &gt, 3).unwrap();
        assert_eq!((0..3).map(|i| cm.get(i, i)).sum::<u64>(), 9);
        assert_eq!(miou(&cm), 1.0);
        let cm = confusion(&LabelMap::from_vec(2, 2, vec![1; 4]), &LabelMap::new(2, 2), 2).unwrap();
        assert_eq!(cm.counts, vec![0, 4, 0, 0]);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let gt = LabelMap::new(2, 2);
        let cm = confusion(&gt, &gt, 3).unwrap();
        assert!((miou(&cm) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_and_range_errors() {
        assert!(matches!(
            confusion(&LabelMap::new(2, 2), &LabelMap::new(2, 3), 2),
            Err(Error::Validation(_))
        ));
        let bad = LabelMap::from_vec(1, 2, vec![0, 5]);
        assert!(matches!(
            confusion(&bad, &LabelMap::new(1, 2), 2),
            Err(Error::Validation(_))
        ));
    }

    fn labels(h: usize, w: usize, k: usize) -> impl Strategy<Value = LabelMap> {
        proptest::collection::vec(0..k as u8, h * w).prop_map(move |d| LabelMap::from_vec(h, w, d))
    }

    proptest! {
        #[test]
        fn pooling_is_order_independent(k in 2usize..6, a in labels(4, 4, 5), b in labels(4, 4, 5), c in labels(4, 4, 5)) {
            let clip = |l: &LabelMap| LabelMap::from_vec(4, 4, l.data.iter().map(|&v| v % k as u8).collect());
            let (a, b, c) = (clip(&a), clip(&b), clip(&c));
            let mut x = confusion(&a, &b, k).unwrap();
            x.accumulate(&confusion(&b, &c, k).unwrap()).unwrap();
            let mut y = confusion(&b, &c, k).unwrap();
            y.accumulate(&confusion(&a, &b, k).unwrap()).unwrap();
            prop_assert_eq!(&x, &y);
            prop_assert_eq!(x.total(), 32);
        }
    }
}
