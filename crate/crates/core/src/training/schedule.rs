use super::TrainConfig;
use crate::error::{contract, Result};
use std::f64::consts::PI;

/// Linear warm-up from 0 to `base_lr`, then cosine decay to
/// `base_lr · min_lr_ratio` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(contract(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let base = cfg.base_lr;
    if step < cfg.warmup_steps {
        return Ok(base * step as f64 / cfg.warmup_steps as f64);
    }
    let floor = base * cfg.min_lr_ratio;
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(floor + (base - floor) * 0.5 * (1.0 + (PI * progress).cos()))
}
