//! Optimization, data generation and the end-to-end training loop.

pub mod corpus;
pub mod gradcheck;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use corpus::{generate_synthetic_corpus, Example, Probe, SyntheticCorpus, SyntheticCorpusSpec};
pub use gradcheck::{joint_objective_gradcheck, GradcheckReport};
pub use optim::{adamw_step, clip_global_norm, AdamW, OptimizerState};
pub use schedule::lr_at;
pub use trainer::{MetricsRecord, Trainer};

use crate::error::{config, Result};
use crate::losses::LossWeights;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr_ratio: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub eval_every: usize,
    /// Held-out sequences scored at each evaluation.
    pub eval_batches: usize,
    /// Write a resumable checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_steps: 200,
            total_steps: 2000,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
            batch_size: 8,
            grad_accum: 2,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            loss_weights: LossWeights::default(),
            eval_every: 100,
            eval_batches: 4,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(config(format!(
                "warmup_steps ({}) must be < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        let positive = [
            ("base_lr", self.base_lr),
            ("min_lr_ratio", self.min_lr_ratio),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(config(format!("{name} must be positive, got {v}")));
        }
        if self.min_lr_ratio > 1.0 {
            return Err(config("min_lr_ratio must be <= 1"));
        }
        if self.batch_size == 0
            || self.grad_accum == 0
            || self.eval_every == 0
            || self.eval_batches == 0
        {
            return Err(config(
                "batch_size, grad_accum, eval_every and eval_batches must be >= 1",
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config("weight_decay must be >= 0"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(config("Adam betas must lie in [0, 1)"));
        }
        self.loss_weights.validate()
    }
}
