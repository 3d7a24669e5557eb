use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub decay_start_epoch: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub total_epochs: usize,
    pub tfc_lr_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 4e-4,
            warmup_start_lr: 4e-6,
            warmup_epochs: 10,
            decay_start_epoch: 50,
            decay_every: 20,
            decay_factor: 0.4,
            total_epochs: 150,
            tfc_lr_scale: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let positive = [
            ("schedule.base_lr", self.base_lr),
            ("schedule.warmup_start_lr", self.warmup_start_lr),
            ("schedule.decay_factor", self.decay_factor),
            ("schedule.tfc_lr_scale", self.tfc_lr_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name}: must be a positive finite number, got {v}"));
            }
        }
        if self.decay_factor > 1.0 {
            errs.push(format!(
                "schedule.decay_factor: must be at most 1, got {}",
                self.decay_factor
            ));
        }
        if self.total_epochs == 0 {
            errs.push("schedule.total_epochs: must be positive".into());
        }
        if self.decay_every == 0 {
            errs.push("schedule.decay_every: must be positive".into());
        }
        if self.decay_start_epoch <= self.warmup_epochs {
            errs.push(format!(
                "schedule.decay_start_epoch: {} must come after the {} warmup epochs",
                self.decay_start_epoch, self.warmup_epochs
            ));
        }
        errs
    }
}

/// Learning rates for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub base: f64,
    pub tfc: f64,
}

/// Rounds to 15 significant decimal digits, so rates built from decimal
/// constants (e.g. `4e-4 * 0.4^2`) land on the nearest double of the exact
/// decimal value instead of accumulating representation error.
fn decimal_round(x: f64) -> f64 {
    format!("{x:.14e}").parse().expect("formatted float parses")
}

/// Warmup, plateau, then step decay; the TFC group runs at a fixed fraction.
/// A new rate applies from the first step of its epoch.
pub fn lr_at(epoch: usize, cfg: &ScheduleConfig) -> Result<GroupRates> {
    if epoch < 1 || epoch > cfg.total_epochs {
        return Err(HatError::Input(format!(
            "epoch {epoch} outside 1..={}",
            cfg.total_epochs
        )));
    }
    let base = if epoch <= cfg.warmup_epochs {
        if cfg.warmup_epochs == 1 {
            cfg.base_lr
        } else {
            let t = (epoch - 1) as f64 / (cfg.warmup_epochs - 1) as f64;
            cfg.warmup_start_lr * (1.0 - t) + cfg.base_lr * t
        }
    } else if epoch < cfg.decay_start_epoch {
        cfg.base_lr
    } else {
        let steps = 1 + (epoch - cfg.decay_start_epoch) / cfg.decay_every;
        cfg.base_lr * cfg.decay_factor.powi(steps as i32)
    };
    let base = decimal_round(base);
    Ok(GroupRates {
        base,
        tfc: decimal_round(base * cfg.tfc_lr_scale),
    })
}
