//! Pixel-level F1 and IoU of the tampered class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    /// Binarizes `pred` with `>= threshold`; `gt` is tampered where `>= 0.5`.
    pub fn from_masks(pred: &[f64], gt: &[f64], threshold: f64) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "f1_iou",
                format!("pred has {} pixels, gt has {}", pred.len(), gt.len()),
            ));
        }
        let mut c = Counts::default();
        for (&p, &y) in pred.iter().zip(gt) {
            match (p >= threshold, y >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// `2TP / (2TP + FP + FN)`, 1 when both masks are empty.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    /// `TP / (TP + FP + FN)`, 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub f1: f64,
    pub iou: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

pub fn f1_iou(name: &str, pred: &[f64], gt: &[f64], threshold: f64) -> Result<ImageScore> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let counts = Counts::from_masks(pred, gt, threshold)?;
    Ok(ImageScore {
        name: name.to_string(),
        f1: counts.f1(),
        iou: counts.iou(),
        counts,
    })
}

/// Per-image scores with their dataset means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub images: Vec<ImageScore>,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub totals: Counts,
}

impl MetricReport {
    pub fn new(threshold: f64, images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_f1 = images.iter().map(|s| s.f1).sum::<f64>() / n;
        let mean_iou = images.iter().map(|s| s.iou).sum::<f64>() / n;
        let mut totals = Counts::default();
        for s in &images {
            totals.tp += s.counts.tp;
            totals.fp += s.counts.fp;
            totals.fn_ += s.counts.fn_;
            totals.tn += s.counts.tn;
        }
        Self {
            threshold,
            images,
            mean_f1,
            mean_iou,
            totals,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_coverage() {
        let gt = vec![1.0; 100];
        let pred: Vec<f64> = (0..100).map(|i| if i < 50 { 0.9 } else { 0.1 }).collect();
        let s = f1_iou("x", &pred, &gt, 0.5).unwrap();
        assert_eq!((s.counts.tp, s.counts.fp, s.counts.fn_), (50, 0, 50));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.iou - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let z = vec![0.0; 9];
        assert_eq!(f1_iou("e", &z, &z, 0.5).unwrap().f1, 1.0);
        let mut p = z.clone();
        p[3] = 1.0;
        let s = f1_iou("fp", &p, &z, 0.5).unwrap();
        assert_eq!((s.f1, s.iou), (0.0, 0.0));
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(f1_iou("t", &[0.0], &[0.0], 1.0).is_err());
    }
}
