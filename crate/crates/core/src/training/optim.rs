//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter (empty for frozen ones) and the
/// number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| {
                    if p.trainable() {
                        vec![0.0; p.tensor.numel()]
                    } else {
                        Vec::new()
                    }
                })
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the factor applied (1 when already within bounds).
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if !(norm > max_norm) {
        return 1.0;
    }
    let factor = max_norm / norm;
    grads
        .iter_mut()
        .flatten()
        .for_each(|g| g.iter_mut().for_each(|x| *x *= factor));
    factor
}

pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update of every trainable parameter: `w ← w − lr·wd·w`, then the
/// bias-corrected Adam step. `grads` is indexed like the store; frozen
/// entries are ignored.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    for (id, p) in store.iter() {
        if !p.trainable() {
            continue;
        }
        match grads.get(id.index()).and_then(Option::as_ref) {
            Some(g) if g.len() == p.tensor.numel() => {
                if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        term: format!("gradient of {}", p.name),
                        value: *bad,
                    });
                }
            }
            _ => {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: vec![grads
                        .get(id.index())
                        .and_then(Option::as_ref)
                        .map_or(0, Vec::len)],
                })
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (id, p) in store.iter_mut() {
        if !p.trainable() {
            continue;
        }
        let i = id.index();
        let g = grads[i].as_ref().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *w -= lr * hp.weight_decay * *w;
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
