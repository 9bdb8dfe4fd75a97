use super::{Tape, Tensor, Var};
use crate::error::{contract, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (in order)
/// and must return a scalar. Only tensors with `requires_grad` are swept.
/// Returns the maximum relative error over all swept coordinates.
pub fn finite_difference_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(contract(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for j in 0..grad.len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad[j], numeric));
        }
    }
    Ok(worst)
}
