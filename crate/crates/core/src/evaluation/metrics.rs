//! Per-class overlap metrics on class maps.

use ndarray::Array2;

use crate::{Error, Result};

/// Pixel counts for one class: |P ∩ G|, |P| and |G|.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlapCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl OverlapCounts {
    pub fn of(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u8) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} differ",
                pred.dim(),
                gt.dim()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p == class_id, g == class_id);
            c.intersection += (p && g) as u64;
            c.predicted += p as u64;
            c.truth += g as u64;
        }
        Ok(c)
    }

    /// `None` when the class is absent from both maps.
    pub fn dice(&self) -> Option<f64> {
        let denom = self.predicted + self.truth;
        (denom > 0).then(|| 2.0 * self.intersection as f64 / denom as f64)
    }

    pub fn iou(&self) -> Option<f64> {
        let union = self.predicted + self.truth - self.intersection;
        (union > 0).then(|| self.intersection as f64 / union as f64)
    }
}

pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u8) -> Result<Option<f64>> {
    Ok(OverlapCounts::of(pred, gt, class_id)?.dice())
}

pub fn iou(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u8) -> Result<Option<f64>> {
    Ok(OverlapCounts::of(pred, gt, class_id)?.iou())
}
