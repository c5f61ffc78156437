//! Learning-rate schedule and the two-stage controller.

use serde::{Deserialize, Serialize};

use crate::block::Stage;
use crate::error::{Error, Result};

/// Linear warm-up from 0 to `peak` over `warmup` epochs, then cosine decay
/// to 0 at `total`. `epoch` may be fractional.
pub fn lr_at(epoch: f64, total: f64, warmup: f64, peak: f64) -> Result<f64> {
    if !(total > warmup && warmup >= 0.0) {
        return Err(Error::Range(format!(
            "schedule needs total > warmup >= 0, got total {total}, warmup {warmup}"
        )));
    }
    let e = epoch.clamp(0.0, total);
    if e < warmup {
        return Ok(peak * e / warmup);
    }
    let s = (e - warmup) / (total - warmup);
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * s).cos()))
}

/// Decides the training stage of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageController {
    pub two_stage: bool,
    /// Fraction of the epochs spent in stage one.
    pub split_fraction: f64,
    pub total_epochs: usize,
}

impl StageController {
    pub fn new(two_stage: bool, split_fraction: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&split_fraction) {
            return Err(Error::Config(format!(
                "split fraction {split_fraction} outside [0, 1]"
            )));
        }
        Ok(Self {
            two_stage,
            split_fraction,
            total_epochs,
        })
    }

    /// First epoch of stage two.
    pub fn switch_epoch(&self) -> usize {
        if self.two_stage {
            (self.split_fraction * self.total_epochs as f64).round() as usize
        } else {
            0
        }
    }

    pub fn stage_at(&self, epoch: usize) -> Stage {
        if epoch < self.switch_epoch() {
            Stage::One
        } else {
            Stage::Two
        }
    }
}
