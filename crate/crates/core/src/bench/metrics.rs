//! One-pass evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BBox;

pub const PRECISION_THRESHOLD: f64 = 20.0;
pub const SUCCESS_THRESHOLDS: usize = 21;

/// Fraction of frames whose centre error is at most `threshold` pixels.
pub fn precision_score(cle: &[f64], threshold: f64) -> Result<f64> {
    if cle.is_empty() {
        return Err(Error::invalid("precision of an empty sequence"));
    }
    Ok(cle.iter().filter(|&&e| e <= threshold).count() as f64 / cle.len() as f64)
}

/// Mean over thresholds `0, 0.05, …, 1` of the fraction of frames with
/// IoU strictly above the threshold.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::invalid("success AUC of an empty sequence"));
    }
    let n = ious.len() as f64;
    let total: f64 = (0..SUCCESS_THRESHOLDS)
        .map(|k| {
            let t = k as f64 / (SUCCESS_THRESHOLDS - 1) as f64;
            ious.iter().filter(|&&v| v > t).count() as f64 / n
        })
        .sum();
    Ok(total / SUCCESS_THRESHOLDS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ious: Vec<f64>,
    pub cles: Vec<f64>,
    pub precision_at_20: f64,
    pub success_auc: f64,
}

impl EvalResult {
    pub fn from_boxes(pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        Self::from_boxes_with(pred, gt, PRECISION_THRESHOLD)
    }

    /// As [`EvalResult::from_boxes`] with another precision threshold.
    pub fn from_boxes_with(pred: &[BBox], gt: &[BBox], precision_threshold: f64) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len())));
        }
        let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g).clamp(0.0, 1.0)).collect();
        let cles: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
        Ok(Self {
            precision_at_20: precision_score(&cles, precision_threshold)?,
            success_auc: success_auc(&ious)?,
            ious,
            cles,
        })
    }

    /// Pools the frames of several sequences into one result.
    pub fn merge(results: &[EvalResult]) -> Result<Self> {
        let ious: Vec<f64> = results.iter().flat_map(|r| r.ious.iter().copied()).collect();
        let cles: Vec<f64> = results.iter().flat_map(|r| r.cles.iter().copied()).collect();
        Ok(Self { precision_at_20: precision_score(&cles, PRECISION_THRESHOLD)?, success_auc: success_auc(&ious)?, ious, cles })
    }

    pub fn mean_iou(&self) -> f64 {
        self.ious.iter().sum::<f64>() / self.ious.len().max(1) as f64
    }
}
