//! Pixel confusion counts and the derived binary-classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::substrate::tensor::Tensor;

/// Confusion class of a single pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PixelClass {
    TrueNegative,
    TruePositive,
    FalsePositive,
    FalseNegative,
}

pub fn classify(pred: bool, gt: bool) -> PixelClass {
    match (pred, gt) {
        (false, false) => PixelClass::TrueNegative,
        (true, true) => PixelClass::TruePositive,
        (true, false) => PixelClass::FalsePositive,
        (false, true) => PixelClass::FalseNegative,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add_pixel(&mut self, pred: bool, gt: bool) {
        match classify(pred, gt) {
            PixelClass::TruePositive => self.tp += 1,
            PixelClass::TrueNegative => self.tn += 1,
            PixelClass::FalsePositive => self.fp += 1,
            PixelClass::FalseNegative => self.fn_ += 1,
        }
    }

    /// Counts from two binary masks of equal shape; values above 0.5 are positive.
    pub fn from_masks(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        ensure!(
            pred.shape() == gt.shape(),
            Error::shape("confusion", format!("{:?} vs {:?}", pred.shape(), gt.shape()))
        );
        let mut c = Self::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            c.add_pixel(p > 0.5, g > 0.5);
        }
        Ok(c)
    }

    /// Counts for probabilities thresholded at `threshold` (`p ≥ threshold` is positive).
    pub fn from_probabilities(prob: &Tensor, gt: &Tensor, threshold: f64) -> Result<Self> {
        Self::from_masks(&prob.map(|p| (p >= threshold) as u8 as f64), gt)
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn metrics(&self) -> Metrics {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
        let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        Metrics {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            mcc: ratio(tp * tn - fp * fn_, mcc_den),
            iou: ratio(tp, tp + fp + fn_),
        }
    }
}

/// Zero denominators give 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub iou: f64,
}

/// Scores of a predicted mask against ground truth.
pub fn metrics(pred: &Tensor, gt: &Tensor) -> Result<Metrics> {
    Ok(Confusion::from_masks(pred, gt)?.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Tensor {
        Tensor::new(vec![bits.len()], bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let m = mask(&[1, 0, 1, 1, 0]);
        let s = metrics(&m, &m).unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.mcc, s.iou), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_negative_prediction_is_zero() {
        let s = metrics(&mask(&[0, 0, 0, 0]), &mask(&[1, 0, 1, 0])).unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.mcc, s.iou), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn inverted_prediction_has_mcc_minus_one() {
        let s = metrics(&mask(&[0, 1, 0, 1]), &mask(&[1, 0, 1, 0])).unwrap();
        assert_eq!(s.mcc, -1.0);
    }

    #[test]
    fn thresholding_is_inclusive() {
        let p = Tensor::new(vec![3], vec![0.5, 0.49, 0.9]).unwrap();
        let c = Confusion::from_probabilities(&p, &mask(&[1, 1, 0]), 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, tn: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(metrics(&mask(&[1, 0]), &mask(&[1, 0, 0])).is_err());
    }
}
