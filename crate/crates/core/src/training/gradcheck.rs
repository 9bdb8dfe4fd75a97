//! Finite-difference check of the full training objective.

use super::trainer::Trainer;
use crate::config::RunConfig;
use crate::error::Result;
use crate::params::Bindings;
use crate::tensor::{finite_difference_check, Tensor, DEFAULT_FD_EPS};
use crate::training::Example;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    /// Number of trainable scalars swept.
    pub coordinates: usize,
}

/// Builds the trainer for `cfg`, gives every adapter a nonzero up-matrix so
/// all trainable tensors receive gradient, fills each expert queue with
/// random projections, and compares the analytic gradient of the joint loss
/// on one micro-batch (dropout on, seeded) against central differences.
pub fn joint_objective_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let mut trainer = Trainer::from_run_config(cfg)?;
    trainer.model.perturb_adapters(0.1, cfg.train.seed ^ 0x6C);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x51);
    for bank in &mut trainer.queues {
        for q in &mut bank.queues {
            for _ in 0..q.capacity() {
                let row = Tensor::randn(&[q.dim()], 1.0, &mut rng);
                q.push(row.data());
            }
        }
    }
    let examples: Vec<&Example> = trainer
        .corpus
        .examples
        .iter()
        .take(cfg.train.batch_size)
        .collect();
    let negatives = trainer.negatives(0);
    let params = trainer.model.store.tensors();
    let coordinates = trainer.model.store.num_trainable_values();
    let max_relative_error = finite_difference_check(
        |tape, vars| {
            let bind = Bindings::from_vars(vars.to_vec());
            Ok(trainer.objective(tape, &bind, &examples, &negatives, 0)?.0)
        },
        &params,
        DEFAULT_FD_EPS,
    )?;
    Ok(GradcheckReport {
        max_relative_error,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_model_gradients_match_finite_differences() {
        let report = joint_objective_gradcheck(&RunConfig::gradcheck()).unwrap();
        assert!(report.coordinates > 1000);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
