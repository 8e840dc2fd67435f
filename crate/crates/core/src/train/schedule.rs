use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential decay from `lr_start` to `lr_end` over `total_iters`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_iters: usize,
}

impl LrSchedule {
    pub const STAGE1: LrSchedule = LrSchedule {
        lr_start: 5e-3,
        lr_end: 1e-4,
        total_iters: 40_000,
    };
    pub const STAGE2: LrSchedule = LrSchedule {
        lr_start: 1e-3,
        lr_end: 1e-5,
        total_iters: 100_000,
    };

    pub const fn new(lr_start: f64, lr_end: f64, total_iters: usize) -> Self {
        Self {
            lr_start,
            lr_end,
            total_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// `lr_start * (lr_end / lr_start)^(iter / total_iters)`; the endpoints
/// are returned exactly.
pub fn lr_at(schedule: &LrSchedule, iter: usize) -> Result<f64> {
    if iter > schedule.total_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond schedule length {}",
            schedule.total_iters
        )));
    }
    if iter == 0 {
        return Ok(schedule.lr_start);
    }
    if iter == schedule.total_iters {
        return Ok(schedule.lr_end);
    }
    let t = iter as f64 / schedule.total_iters as f64;
    Ok(schedule.lr_start * (schedule.lr_end / schedule.lr_start).powf(t))
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grad` in place to norm `threshold` when its L2 norm exceeds
/// it; returns the factor applied (1 when unchanged).
pub fn clip_gradient(grad: &mut [f64], threshold: f64) -> f64 {
    let n = l2_norm(grad);
    if n > threshold && threshold > 0.0 {
        let s = threshold / n;
        grad.iter_mut().for_each(|g| *g *= s);
        s
    } else {
        1.0
    }
}
