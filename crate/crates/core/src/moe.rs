//! Sparse LoRA experts behind a top-k linear router, fused with the frozen
//! MLP acting as a shared expert.
//!
//! Experts are evaluated densely and multiplied by gates that are exactly
//! zero outside each token's top-k set, so unselected experts contribute
//! nothing to the output and receive zero gradient.

use crate::error::{config, Error, Result};
use crate::model::BaseMlp;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{CounterRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Logit used to exclude unselected experts before the gate softmax. Finite,
/// and far enough below any real logit that `exp` underflows to exactly 0.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RouterNoise {
    #[default]
    None,
    /// Additive N(0, σ²) on router logits during training.
    Gaussian(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    pub router_noise: RouterNoise,
    /// Std of the router weight initialization.
    pub router_init_std: f64,
}

impl Default for MoeConfig {
    /// Desk-scale defaults (4 experts, top-2, rank 4, alpha 8).
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            rank: 4,
            lora_alpha: 8.0,
            router_noise: RouterNoise::None,
            router_init_std: 0.02,
        }
    }
}

impl MoeConfig {
    /// Full-scale setting: 16 experts, top-4, rank 16, alpha 32.
    pub fn full_scale() -> Self {
        Self {
            num_experts: 16,
            top_k: 4,
            rank: 16,
            lora_alpha: 32.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(config(format!(
                "need 1 <= top_k <= num_experts, got top_k={} num_experts={}",
                self.top_k, self.num_experts
            )));
        }
        if self.rank == 0 {
            return Err(config("expert rank must be >= 1"));
        }
        let scale = self.lora_alpha / self.rank as f64;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(config(format!(
                "expert scale alpha/r = {scale} must be finite and positive"
            )));
        }
        if let RouterNoise::Gaussian(s) = self.router_noise {
            if !(s.is_finite() && s >= 0.0) {
                return Err(config(format!("router noise std {s} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Low-rank expert `x ↦ (alpha / r) · up(down(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    /// `[r, d]`
    pub down: ParamId,
    /// `[d, r]`
    pub up: ParamId,
    pub lora_alpha: f64,
    pub rank: usize,
}

impl LoraExpert {
    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// `[n, d]`
    pub weight: ParamId,
    pub num_experts: usize,
    pub top_k: usize,
    pub noise: RouterNoise,
}

/// Plain-value routing decision for a batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    /// `[.., n]`, zero outside each token's selected set.
    pub gates: Tensor,
    /// Router logits (after noise, before selection), `[.., n]`.
    pub logits: Tensor,
    /// `[tokens * k]`, per token in descending-logit order.
    pub selected: Vec<usize>,
    pub top_k: usize,
}

impl RouterOutput {
    pub fn num_tokens(&self) -> usize {
        self.selected.len() / self.top_k
    }

    pub fn num_experts(&self) -> usize {
        self.gates.last_dim()
    }

    pub fn selected_for(&self, token: usize) -> &[usize] {
        &self.selected[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn gate_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.gates.rows()
    }
}

/// Routing decision recorded on a tape.
#[derive(Debug, Clone)]
pub struct RoutingVars {
    pub logits: Var,
    pub gates: Var,
    pub selected: Vec<usize>,
    pub top_k: usize,
}

impl RoutingVars {
    pub fn to_output(&self, tape: &Tape) -> RouterOutput {
        RouterOutput {
            gates: tape.value(self.gates).detached(),
            logits: tape.value(self.logits).detached(),
            selected: self.selected.clone(),
            top_k: self.top_k,
        }
    }
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-k selection followed by a softmax over the selected logits only.
pub fn route_logits(tape: &mut Tape, logits: Var, k: usize) -> Result<RoutingVars> {
    let n = tape.value(logits).last_dim();
    if k == 0 || k > n {
        return Err(config(format!("top_k={k} with {n} experts")));
    }
    let mut selected = Vec::new();
    let mut mask = Vec::with_capacity(tape.value(logits).numel());
    for row in tape.value(logits).rows() {
        let top = top_k_indices(row, k);
        let mut keep = vec![false; n];
        top.iter().for_each(|&i| keep[i] = true);
        mask.extend(keep.iter().map(|&kept| !kept));
        selected.extend(top);
    }
    let gates = if k == n {
        tape.softmax(logits)
    } else {
        let masked = tape.masked_fill(logits, &mask, MASKED_LOGIT)?;
        tape.softmax(masked)
    };
    Ok(RoutingVars {
        logits,
        gates,
        selected,
        top_k: k,
    })
}

/// Value-level routing of precomputed logits.
pub fn gates_from_logits(logits: &Tensor, k: usize) -> Result<RouterOutput> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.detached());
    Ok(route_logits(&mut tape, l, k)?.to_output(&tape))
}

fn gaussian_noise(shape: &[usize], std: f64, rng: CounterRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel as u64)
        .map(|i| {
            // Box-Muller on two independent counter draws
            let u1 = rng.uniform_at(2 * i).max(f64::MIN_POSITIVE);
            let u2 = rng.uniform_at(2 * i + 1);
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).expect("shape from a tensor")
}

/// `logits = x·W_rᵀ (+ noise)`, then top-k gating. Noise is applied only
/// when a generator is supplied and the router is configured with it.
pub fn route(
    tape: &mut Tape,
    bind: &Bindings,
    router: &Router,
    x: Var,
    noise_rng: Option<CounterRng>,
) -> Result<RoutingVars> {
    let w = bind.var(router.weight);
    let wt = tape.transpose(w)?;
    let mut logits = tape.matmul(x, wt)?;
    if let (RouterNoise::Gaussian(std), Some(rng)) = (router.noise, noise_rng) {
        if std > 0.0 {
            let eps = gaussian_noise(tape.shape(logits), std, rng);
            let eps = tape.constant(eps);
            logits = tape.add(logits, eps)?;
        }
    }
    route_logits(tape, logits, router.top_k)
}

/// `(alpha / r) · up(down(x))` for `x: [.., d]`.
pub fn lora_expert_forward(
    tape: &mut Tape,
    bind: &Bindings,
    expert: &LoraExpert,
    x: Var,
) -> Result<Var> {
    let down = bind.var(expert.down);
    let up = bind.var(expert.up);
    let d = tape.shape(down)[1];
    if *tape.shape(x).last().unwrap() != d {
        return Err(Error::Shape {
            op: "lora_expert_forward",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(down).to_vec(),
        });
    }
    let down_t = tape.transpose(down)?;
    let up_t = tape.transpose(up)?;
    let h = tape.matmul(x, down_t)?;
    let o = tape.matmul(h, up_t)?;
    Ok(tape.scale(o, expert.scale()))
}

/// One MoE sublayer: experts plus their router.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlock {
    pub experts: Vec<LoraExpert>,
    pub router: Router,
}

impl MoeBlock {
    pub fn build(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        hidden: usize,
        cfg: &MoeConfig,
    ) -> Self {
        let experts = (0..cfg.num_experts)
            .map(|i| LoraExpert {
                down: store.add_randn(
                    seed,
                    &format!("{prefix}.expert{i}.down"),
                    &[cfg.rank, hidden],
                    1.0 / (cfg.rank as f64).sqrt(),
                    true,
                ),
                up: store.add(
                    format!("{prefix}.expert{i}.up"),
                    Tensor::zeros(&[hidden, cfg.rank]),
                    true,
                ),
                lora_alpha: cfg.lora_alpha,
                rank: cfg.rank,
            })
            .collect();
        let router = Router {
            weight: store.add_randn(
                seed,
                &format!("{prefix}.router"),
                &[cfg.num_experts, hidden],
                cfg.router_init_std,
                true,
            ),
            num_experts: cfg.num_experts,
            top_k: cfg.top_k,
            noise: cfg.router_noise,
        };
        Self { experts, router }
    }
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// `H_shared + H_route`
    pub h_final: Var,
    pub h_route: Var,
    pub h_shared: Var,
    pub routing: RoutingVars,
}

/// `H_route = Σ_i gate_i ⊙ expert_i(x)` and `H_final = shared(x) + H_route`.
pub fn moe_layer_forward(
    tape: &mut Tape,
    bind: &Bindings,
    block: &MoeBlock,
    shared: &BaseMlp,
    x: Var,
    noise_rng: Option<CounterRng>,
) -> Result<MoeOutput> {
    if block.experts.len() != block.router.num_experts {
        return Err(config(format!(
            "{} experts but router expects {}",
            block.experts.len(),
            block.router.num_experts
        )));
    }
    let routing = route(tape, bind, &block.router, x, noise_rng)?;
    let mut h_route: Option<Var> = None;
    for (i, expert) in block.experts.iter().enumerate() {
        let e = lora_expert_forward(tape, bind, expert, x)?;
        let g = tape.narrow(routing.gates, i, 1)?;
        let contrib = tape.mul(g, e)?;
        h_route = Some(match h_route {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    let h_route = h_route.ok_or_else(|| config("MoE block without experts"))?;
    let h_shared = shared.forward(tape, bind, x)?;
    let h_final = tape.add(h_shared, h_route)?;
    Ok(MoeOutput {
        h_final,
        h_route,
        h_shared,
        routing,
    })
}

/// Mean gate per expert over all tokens, `P̄_i`.
pub fn routing_stats(out: &RouterOutput) -> Tensor {
    let n = out.num_experts();
    let mut p = vec![0.0; n];
    let rows = out.gates.numel() / n;
    for row in out.gate_rows() {
        p.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }
    p.iter_mut().for_each(|v| *v /= rows as f64);
    Tensor::new(&[n], p).expect("n >= 1")
}

/// Differentiable `P̄` from recorded gates.
pub fn mean_gates(tape: &mut Tape, gates: Var) -> Result<Var> {
    let n = tape.value(gates).last_dim();
    let rows = tape.value(gates).numel() / n;
    let flat = tape.reshape(gates, &[rows, n])?;
    let s = tape.sum_axis(flat, 0)?;
    Ok(tape.scale(s, 1.0 / rows as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.0, 3.0, 3.0, 1.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.5, -1.0, 2.0], 3), vec![2, 0, 1]);
    }

    #[test]
    fn route_example_two_of_four() {
        let logits = Tensor::new(&[1, 4], vec![2.0, 1.0, 0.5, -1.0]).unwrap();
        let out = gates_from_logits(&logits, 2).unwrap();
        assert_eq!(out.selected, vec![0, 1]);
        let g = out.gates.data();
        assert!((g[0] - 0.731059).abs() < 1e-6);
        assert!((g[1] - 0.268941).abs() < 1e-6);
        assert_eq!(&g[2..], &[0.0, 0.0]);
    }

    #[test]
    fn full_k_is_full_softmax() {
        let logits = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 5.0, 0.0]).unwrap();
        let out = gates_from_logits(&logits, 3).unwrap();
        let want = crate::tensor::softmax_last_dim(&logits);
        assert!(out.gates.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn equal_logits_select_lowest_indices() {
        let logits = Tensor::new(&[1, 5], vec![0.7; 5]).unwrap();
        let out = gates_from_logits(&logits, 3).unwrap();
        assert_eq!(out.selected, vec![0, 1, 2]);
        for (i, g) in out.gates.data().iter().enumerate() {
            let want = if i < 3 { 1.0 / 3.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-15);
        }
    }

    #[test]
    fn routing_stats_examples() {
        let one = RouterOutput {
            gates: Tensor::new(&[1, 4], vec![0.7, 0.3, 0.0, 0.0]).unwrap(),
            logits: Tensor::zeros(&[1, 4]),
            selected: vec![0, 1],
            top_k: 2,
        };
        assert_eq!(routing_stats(&one).data(), &[0.7, 0.3, 0.0, 0.0]);
        let two = RouterOutput {
            gates: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            logits: Tensor::zeros(&[2, 2]),
            selected: vec![0, 1],
            top_k: 1,
        };
        assert_eq!(routing_stats(&two).data(), &[0.5, 0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(MoeConfig::default().validate().is_ok());
        let bad = MoeConfig {
            top_k: 5,
            ..MoeConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let full = MoeConfig::full_scale();
        assert_eq!(
            (full.num_experts, full.top_k, full.rank, full.lora_alpha),
            (16, 4, 16, 32.0)
        );
    }
}
