//! Training hyperparameters and the poly learning-rate schedule.

use crate::error::{Error, Result};
use crate::ops::LossReduction;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub crop: usize,
    pub scales: Vec<f64>,
    /// Per-channel means subtracted from the input image.
    pub means: [f64; 3],
    pub ignore_index: u8,
    pub loss_reduction: LossReduction,
    /// Checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            power: 0.9,
            max_iter: 60_000,
            batch_size: 14,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0005,
            adam_eps: 1e-8,
            seed: 1,
            crop: 680,
            scales: vec![0.5, 0.75, 1.0, 1.5, 1.75, 2.0],
            means: [0.0; 3],
            ignore_index: 255,
            loss_reduction: LossReduction::Mean,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.power < 0.0 {
            return Err(Error::Config("power must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("scale set must be non-empty".into()));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("scales must be positive".into()));
        }
        if self.crop == 0 {
            return Err(Error::Config("crop must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// `lr = base_lr * (1 - iter/max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::InvalidArg(format!(
            "iteration {iter} exceeds max_iter {}",
            cfg.max_iter
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.base_lr * frac.powf(cfg.power))
}
