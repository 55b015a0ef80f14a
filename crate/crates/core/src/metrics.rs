//! Overlap metrics between binary masks.

use crate::error::{Error, Result};
use crate::losses::VoxelMask;
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &VoxelMask, gt: &VoxelMask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(format!("prediction {:?} vs reference {:?}", pred.dims(), gt.dims())));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Ratio with the convention that `0 / 0` is a perfect score.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Five overlap scores in `[0, 1]`.
///
/// Empty denominators: both masks empty scores 1 on every metric. An empty
/// prediction against a nonempty reference scores 0 on every overlap metric,
/// including precision; a nonempty prediction against an empty reference
/// likewise scores 0, including recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// `1 - |V_pred - V_gt| / (V_pred + V_gt)`.
    pub vs: f64,
}

impl Metrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (tp, fp, fn_) = (c.tp, c.fp, c.fn_);
        let vs = if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            1.0 - fp.abs_diff(fn_) as f64 / (2 * tp + fp + fn_) as f64
        };
        Metrics {
            dice: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            precision: if tp + fp == 0 && fn_ > 0 { 0.0 } else { ratio(tp, tp + fp) },
            recall: if tp + fn_ == 0 && fp > 0 { 0.0 } else { ratio(tp, tp + fn_) },
            vs,
        }
    }

    /// Component-wise mean; `None` for an empty slice.
    pub fn mean(all: &[Metrics]) -> Option<Metrics> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Some(Metrics {
            dice: sum(|m| m.dice),
            iou: sum(|m| m.iou),
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            vs: sum(|m| m.vs),
        })
    }
}

pub fn evaluate(pred: &VoxelMask, gt: &VoxelMask) -> Result<Metrics> {
    Ok(Metrics::from_counts(&ConfusionCounts::from_masks(pred, gt)?))
}

/// Hard foreground masks by argmax over the class axis of `[B, K, D, H, W]`
/// logits; ties go to the lower class.
pub fn argmax_masks<T: Element>(logits: &Tensor<T>) -> Result<Vec<VoxelMask>> {
    if logits.ndim() != 5 || logits.dim(1) < 2 {
        return Err(Error::shape(format!("expected [B, K, D, H, W] logits, got {:?}", logits.shape())));
    }
    let [b, k] = [logits.dim(0), logits.dim(1)];
    let dims = [logits.dim(2), logits.dim(3), logits.dim(4)];
    let v: usize = dims.iter().product();
    let x = logits.data();
    (0..b)
        .map(|bi| {
            let bits = (0..v)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if x[(bi * k + c) * v + i] > x[(bi * k + best) * v + i] {
                            best = c;
                        }
                    }
                    best == 1
                })
                .collect();
            VoxelMask::new(dims, bits)
        })
        .collect()
}
