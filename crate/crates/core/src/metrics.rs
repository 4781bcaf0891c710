//! Segmentation and image-quality metrics.

use alloc::{format, vec, vec::Vec};

use crate::error::{Error, Result};
use crate::math;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim("confusion matrix", format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: u8, pred: u8) -> Result<()> {
        let (t, p) = (truth as usize, pred as usize);
        if t >= self.classes || p >= self.classes {
            return Err(Error::Domain {
                what: "class id",
                detail: format!("({t}, {p}) with {} classes", self.classes),
            });
        }
        self.counts[t * self.classes + p] += 1;
        Ok(())
    }

    /// Accumulates aligned label rasters.
    pub fn add_all(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::dim("confusion matrix", format!("{} truth vs {} predicted", truth.len(), pred.len())));
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("confusion merge", format!("{} vs {} classes", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Mean IoU and per-class IoU. A class absent from both ground truth and
/// prediction has no IoU (`None`) and does not enter the mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    if cm.total() == 0 {
        return Err(Error::contract("miou", "empty confusion matrix"));
    }
    let l = cm.classes;
    let mut per_class = Vec::with_capacity(l);
    for c in 0..l {
        let tp = cm.get(c, c);
        let fn_: u64 = (0..l).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
        let fp: u64 = (0..l).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
        let denom = tp + fp + fn_;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((mean, per_class))
}

/// Reported when two images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1 / MSE)` for intensities in `[0, 1]`.
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("psnr", format!("{} vs {} values", pred.len(), target.len())));
    }
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * math::log10(1.0 / mse)).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add_all(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(miou(&cm).unwrap().0, 1.0);
    }

    #[test]
    fn complement_is_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add_all(&[0, 1, 1], &[1, 0, 0]).unwrap();
        assert_eq!(miou(&cm).unwrap().0, 0.0);
    }

    #[test]
    fn absent_class_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add_all(&[0, 1], &[0, 1]).unwrap();
        let (m, per) = miou(&cm).unwrap();
        assert_eq!(per, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(miou(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn psnr_edges() {
        assert_eq!(psnr(&[0.3; 4], &[0.3; 4]).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&[0.0; 4], &[1.0; 4]).unwrap(), 0.0);
        assert!(psnr(&[0.0; 3], &[0.0; 4]).is_err());
    }
}
