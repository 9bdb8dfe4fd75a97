//! Language-modeling, load-balancing and weighted total losses.
//!
//! Natural logarithms throughout.

use crate::error::{config, contract, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Floor applied to mean gate probabilities before taking logs.
pub const BALANCE_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub balance_weight: f64,
    pub contrastive_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            balance_weight: 0.01,
            contrastive_weight: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("balance_weight", self.balance_weight),
            ("contrastive_weight", self.contrastive_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub balance: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Masked mean of `−log softmax(logits)[target]`.
///
/// `targets` and `mask` are indexed like the leading `[B, T]` axes of
/// `logits`; row `(b, t)` is scored against `targets[b·T + t]`, so callers
/// pass the input sequence shifted left by one.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let v = tape.value(logits).last_dim();
    let rows = tape.value(logits).numel() / v;
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape {
            op: "lm_loss",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(contract("lm_loss needs at least one supervised position"));
    }
    let logp = tape.log_softmax(logits);
    let picked = tape.select_last(logp, targets)?;
    let w = mask
        .iter()
        .map(|&m| if m { -1.0 / count as f64 } else { 0.0 })
        .collect();
    let shape = tape.shape(picked).to_vec();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let weighted = tape.mul(picked, w)?;
    Ok(tape.sum(weighted))
}

pub fn lm_loss_value(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.detached());
    let loss = lm_loss(&mut tape, l, targets, mask)?;
    Ok(tape.value(loss).item())
}

/// `KL(uniform ‖ P̄) = −ln n − mean_i ln max(P̄_i, 1e-9)`.
pub fn balance_loss(tape: &mut Tape, p_bar: Var) -> Result<Var> {
    let n = tape.value(p_bar).numel();
    let clamped = tape.clamp_min(p_bar, BALANCE_CLAMP);
    let logs = tape.log(clamped)?;
    let m = tape.mean(logs);
    let neg = tape.scale(m, -1.0);
    let offset = tape.constant(Tensor::scalar(-(n as f64).ln()));
    tape.add(neg, offset)
}

pub fn balance_loss_value(p_bar: &[f64]) -> f64 {
    let n = p_bar.len() as f64;
    let mean_log = p_bar.iter().map(|p| p.max(BALANCE_CLAMP).ln()).sum::<f64>() / n;
    -n.ln() - mean_log
}

fn check_finite(term: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            value,
        })
    }
}

/// `lm + α_bal·balance + β·contrastive`, rejecting non-finite terms.
pub fn total_loss(
    lm: f64,
    balance: f64,
    contrastive: f64,
    w: LossWeights,
) -> Result<LossBreakdown> {
    check_finite("lm loss", lm)?;
    check_finite("balance loss", balance)?;
    check_finite("contrastive loss", contrastive)?;
    let total = lm + w.balance_weight * balance + w.contrastive_weight * contrastive;
    check_finite("total loss", total)?;
    Ok(LossBreakdown {
        lm,
        balance,
        contrastive,
        total,
    })
}

/// Differentiable counterpart of [`total_loss`]; also returns the breakdown.
pub fn total_loss_var(
    tape: &mut Tape,
    lm: Var,
    balance: Var,
    contrastive: Var,
    w: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let breakdown = total_loss(
        tape.value(lm).item(),
        tape.value(balance).item(),
        tape.value(contrastive).item(),
        w,
    )?;
    let b = tape.scale(balance, w.balance_weight);
    let c = tape.scale(contrastive, w.contrastive_weight);
    let t = tape.add(lm, b)?;
    let t = tape.add(t, c)?;
    Ok((t, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Tensor::zeros(&[2, 3, 256]);
        let loss = lm_loss_value(&logits, &[5; 6], &[true; 6]).unwrap();
        assert!((loss - 256f64.ln()).abs() < 1e-12);
        assert!((loss - 5.545177).abs() < 1e-6);
    }

    #[test]
    fn confident_target_has_tiny_loss() {
        let mut logits = Tensor::zeros(&[1, 1, 8]);
        logits.data_mut()[3] = 30.0;
        assert!(lm_loss_value(&logits, &[3], &[true]).unwrap() < 1e-9);
    }

    #[test]
    fn masking_matches_loss_on_kept_half() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        let logits = Tensor::randn(&[4, 5], 2.0, &mut rng);
        let targets = [0, 4, 2, 1];
        let mask = [true, false, true, false];
        let masked = lm_loss_value(&logits, &targets, &mask).unwrap();
        let kept = Tensor::new(
            &[2, 5],
            [&logits.data()[0..5], &logits.data()[10..15]].concat(),
        )
        .unwrap();
        let direct = lm_loss_value(&kept, &[0, 2], &[true, true]).unwrap();
        assert!((masked - direct).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_batch_is_rejected() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            lm_loss_value(&logits, &[0, 1], &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn balance_examples() {
        assert!(balance_loss_value(&[0.25; 4]).abs() < 1e-12);
        assert!((balance_loss_value(&[0.4, 0.3, 0.2, 0.1]) - 0.121777).abs() < 1e-6);
        let collapsed = balance_loss_value(&[1.0 - 1e-9, 1e-9]);
        assert!(collapsed.is_finite() && collapsed > 5.0);
        assert!(balance_loss_value(&[1.0, 0.0]).is_finite());
    }

    #[test]
    fn balance_tape_matches_value() {
        let p = [0.1, 0.6, 0.0, 0.3];
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(&[4], p.to_vec()).unwrap());
        let l = balance_loss(&mut tape, v).unwrap();
        assert!((tape.value(l).item() - balance_loss_value(&p)).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let zero = LossWeights {
            balance_weight: 0.0,
            contrastive_weight: 0.0,
        };
        assert_eq!(total_loss(2.5, 9.0, 9.0, zero).unwrap().total, 2.5);
        let t = total_loss(2.0, 0.5, 1.0, LossWeights::default()).unwrap();
        assert!((t.total - 2.015).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_is_named() {
        let err = total_loss(1.0, f64::NAN, 0.0, LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("balance loss"), "{err}");
        let err = total_loss(1.0, 0.0, f64::INFINITY, LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("contrastive loss"), "{err}");
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("positive mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn balance_nonnegative_and_permutation_invariant(p in simplex(6), rot in 0usize..6) {
            let l = balance_loss_value(&p);
            prop_assert!(l >= -1e-12);
            let mut q = p.clone();
            q.rotate_left(rot);
            prop_assert!((balance_loss_value(&q) - l).abs() < 1e-12);
        }
    }
}
