//! One-cycle learning-rate policy with cyclical momentum.
//!
//! The learning rate ramps linearly `lr_min -> lr_max` over the first
//! `step_size` iterations, back down to `lr_min` over the next
//! `step_size`, then decays linearly to `final_lr` over the remaining
//! iterations. Momentum mirrors the two ramps (`high -> low -> high`) and
//! stays at `momentum_high` while the learning rate is annihilated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LR_MAX: f64 = 0.00055;
pub const DEFAULT_MOMENTUM_HIGH: f64 = 0.95;
pub const DEFAULT_MOMENTUM_LOW: f64 = 0.85;
/// Fraction of the total iterations spent on each ramp.
pub const DEFAULT_STEP_FRACTION: f64 = 0.4;
/// `final_lr = lr_min / DEFAULT_ANNIHILATION_FACTOR`.
pub const DEFAULT_ANNIHILATION_FACTOR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum_high: f64,
    pub momentum_low: f64,
    pub step_size: usize,
    pub total_iterations: usize,
    pub final_lr: f64,
}

impl OneCycleConfig {
    /// Defaults for a cycle of `total_iterations`: peak 0.00055, floor a
    /// tenth of the peak, momentum 0.95/0.85, ramps of 40% each.
    pub fn new(total_iterations: usize) -> Self {
        OneCycleConfig::with_peak(DEFAULT_LR_MAX, total_iterations)
    }

    pub fn with_peak(lr_max: f64, total_iterations: usize) -> Self {
        let lr_min = lr_max / 10.0;
        OneCycleConfig {
            lr_max,
            lr_min,
            momentum_high: DEFAULT_MOMENTUM_HIGH,
            momentum_low: DEFAULT_MOMENTUM_LOW,
            step_size: default_step(total_iterations, DEFAULT_STEP_FRACTION),
            total_iterations,
            final_lr: lr_min / DEFAULT_ANNIHILATION_FACTOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schedule(m));
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad(format!(
                "need 0 < lr_min < lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            ));
        }
        if !(self.final_lr > 0.0 && self.final_lr <= self.lr_min) {
            return bad(format!(
                "need 0 < final_lr <= lr_min, got final_lr={}",
                self.final_lr
            ));
        }
        if !(0.0 <= self.momentum_low
            && self.momentum_low < self.momentum_high
            && self.momentum_high < 1.0)
        {
            return bad(format!(
                "need 0 <= momentum_low < momentum_high < 1, got {} / {}",
                self.momentum_low, self.momentum_high
            ));
        }
        if self.step_size == 0 || 2 * self.step_size >= self.total_iterations {
            return bad(format!(
                "need 1 <= step_size and 2*step_size < total_iterations, got step={} total={}",
                self.step_size, self.total_iterations
            ));
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.total_iterations {
            return Err(Error::Schedule(format!(
                "iteration {t} outside [0, {})",
                self.total_iterations
            )));
        }
        Ok(())
    }
}

/// `max(1, round(fraction * total))`, shrunk if needed so both ramps fit
/// strictly inside the cycle.
pub fn default_step(total_iterations: usize, fraction: f64) -> usize {
    let step = ((fraction * total_iterations as f64).round() as usize).max(1);
    step.min(total_iterations.saturating_sub(1) / 2).max(1)
}

/// Exact at both ends: `f = 0` gives `a`, `f = 1` gives `b`.
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a * (1.0 - f) + b * f
}

pub fn lr_at(cfg: &OneCycleConfig, t: usize) -> Result<f64> {
    cfg.check_t(t)?;
    let step = cfg.step_size;
    let lr = if t <= step {
        lerp(cfg.lr_min, cfg.lr_max, t as f64 / step as f64)
    } else if t <= 2 * step {
        lerp(cfg.lr_max, cfg.lr_min, (t - step) as f64 / step as f64)
    } else {
        let tail = (cfg.total_iterations - 1 - 2 * step) as f64;
        lerp(cfg.lr_min, cfg.final_lr, (t - 2 * step) as f64 / tail)
    };
    Ok(lr)
}

pub fn momentum_at(cfg: &OneCycleConfig, t: usize) -> Result<f64> {
    cfg.check_t(t)?;
    let step = cfg.step_size;
    let m = if t <= step {
        lerp(cfg.momentum_high, cfg.momentum_low, t as f64 / step as f64)
    } else if t <= 2 * step {
        lerp(cfg.momentum_low, cfg.momentum_high, (t - step) as f64 / step as f64)
    } else {
        cfg.momentum_high
    };
    Ok(m)
}

/// `(t, lr, momentum)` for every iteration of the cycle.
pub fn table(cfg: &OneCycleConfig) -> Result<Vec<(usize, f64, f64)>> {
    cfg.validate()?;
    (0..cfg.total_iterations)
        .map(|t| Ok((t, lr_at(cfg, t)?, momentum_at(cfg, t)?)))
        .collect()
}
