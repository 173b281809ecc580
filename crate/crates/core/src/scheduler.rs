//! Dynamic confidence threshold and the dual-scale (normal / recovery) policy.
//!
//! The threshold is `tau = 1 - f / (m + 1)` where `m` is the number of masks
//! still open in the window. It tightens as `m` grows and is deliberately not
//! clamped: with `f > m + 1` it goes negative and every masked position is
//! decodable.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserOutput;
use crate::error::{Error, Result};
use crate::types::Mode;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Scaling factor used in normal mode.
    pub f: f64,
    /// Scaling factor used in recovery mode; `f_r <= f`.
    pub f_r: f64,
    /// Re-mask sensitivity, consumed by [`crate::remask`].
    pub lambda: f64,
    /// Rollbacks allowed per block chain.
    pub rollback_budget: u32,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.f) {
            return Err(Error::usage(format!("f must be positive, got {}", self.f)));
        }
        if !finite_pos(self.f_r) {
            return Err(Error::usage(format!("f_r must be positive, got {}", self.f_r)));
        }
        if self.f_r > self.f {
            return Err(Error::usage(format!(
                "f_r ({}) must not exceed f ({})",
                self.f_r, self.f
            )));
        }
        if !finite_pos(self.lambda) {
            return Err(Error::usage(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            f: 0.9,
            f_r: 0.9,
            lambda: 1.0,
            rollback_budget: 1,
        }
    }
}

pub fn threshold(f_curr: f64, masked_count: usize) -> f64 {
    1.0 - f_curr / (masked_count as f64 + 1.0)
}

/// Positions whose confidence clears `tau` (inclusive), in ascending order.
pub fn select_decodable(output: &DenoiserOutput, tau: f64) -> Vec<usize> {
    output
        .predictions
        .iter()
        .filter(|p| p.confidence >= tau)
        .map(|p| p.position)
        .collect()
}

pub fn current_factor(mode: Mode, cfg: &ScheduleConfig) -> f64 {
    match mode {
        Mode::Normal => cfg.f,
        Mode::Recovery => cfg.f_r,
    }
}
