//! Tiny decoder-only transformer with a frozen random backbone, LoRA on the
//! attention projections and a LoRA-MoE in place of each MLP sublayer.
//!
//! Weights are stored `[out, in]` and applied as `y = x·Wᵀ`.

use crate::contrastive::{ContrastiveConfig, HeadId, ProjectionHead};
use crate::error::{config, Error, Result};
use crate::moe::{moe_layer_forward, MoeBlock, MoeConfig, RoutingVars};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{CounterRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub const RMS_EPS: f64 = 1e-6;
const MASKED_SCORE: f64 = -1e30;
/// Std of the frozen positional table, small next to unit-variance token rows.
const POS_EMBED_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_inner_dim: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub seed: u64,
    pub attn_lora_rank: usize,
    pub attn_lora_alpha: f64,
    /// Per-layer switch for attention LoRA; empty means every layer.
    pub attn_lora_layers: Vec<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_inner_dim: 128,
            max_seq_len: 64,
            activation: Activation::Silu,
            seed: 0,
            attn_lora_rank: 4,
            attn_lora_alpha: 8.0,
            attn_lora_layers: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_inner_dim", self.mlp_inner_dim),
            ("max_seq_len", self.max_seq_len),
            ("attn_lora_rank", self.attn_lora_rank),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("{name} must be >= 1")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(self.attn_lora_alpha.is_finite() && self.attn_lora_alpha > 0.0) {
            return Err(config("attn_lora_alpha must be finite and positive"));
        }
        if !self.attn_lora_layers.is_empty() && self.attn_lora_layers.len() != self.num_layers {
            return Err(config(format!(
                "attn_lora_layers has {} entries for {} layers",
                self.attn_lora_layers.len(),
                self.num_layers
            )));
        }
        Ok(())
    }

    pub fn attn_lora_enabled(&self, layer: usize) -> bool {
        self.attn_lora_layers.get(layer).copied().unwrap_or(true)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Frozen projection plus its optional low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraProjection {
    /// `[d, d]`, frozen
    pub base: ParamId,
    /// `(down [r, d], up [d, r])`
    pub adapter: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLoraSet {
    pub q: LoraProjection,
    pub k: LoraProjection,
    pub v: LoraProjection,
    pub o: LoraProjection,
    pub alpha_attn: f64,
    pub r_attn: usize,
}

impl AttentionLoraSet {
    fn build(store: &mut ParamStore, cfg: &ModelConfig, layer: usize) -> Self {
        let d = cfg.hidden_dim;
        let r = cfg.attn_lora_rank;
        let mut proj = |p: &str| {
            let name = format!("layer{layer}.attn.{p}");
            let base = store.add_randn(cfg.seed, &name, &[d, d], 1.0 / (d as f64).sqrt(), false);
            let adapter = cfg.attn_lora_enabled(layer).then(|| {
                let down = store.add_randn(
                    cfg.seed,
                    &format!("{name}.lora_down"),
                    &[r, d],
                    1.0 / (r as f64).sqrt(),
                    true,
                );
                let up = store.add(format!("{name}.lora_up"), Tensor::zeros(&[d, r]), true);
                (down, up)
            });
            LoraProjection { base, adapter }
        };
        Self {
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
            o: proj("o"),
            alpha_attn: cfg.attn_lora_alpha,
            r_attn: r,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha_attn / self.r_attn as f64
    }

    /// `W' = W + (α/r)·B·A`, or just `W` when adapters are off.
    fn effective(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        p: &LoraProjection,
        adapters: bool,
    ) -> Result<Var> {
        let w = bind.var(p.base);
        match (p.adapter, adapters) {
            (Some((down, up)), true) => {
                let ba = tape.matmul(bind.var(up), bind.var(down))?;
                let ba = tape.scale(ba, self.scale());
                tape.add(w, ba)
            }
            _ => Ok(w),
        }
    }
}

/// Frozen two-matrix MLP; doubles as the shared expert.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseMlp {
    /// `[inner, d]`
    pub w_up: ParamId,
    /// `[d, inner]`
    pub w_down: ParamId,
    pub activation: Activation,
}

impl BaseMlp {
    fn build(store: &mut ParamStore, cfg: &ModelConfig, layer: usize) -> Self {
        let (d, inner) = (cfg.hidden_dim, cfg.mlp_inner_dim);
        Self {
            w_up: store.add_randn(
                cfg.seed,
                &format!("layer{layer}.mlp.up"),
                &[inner, d],
                1.0 / (d as f64).sqrt(),
                false,
            ),
            w_down: store.add_randn(
                cfg.seed,
                &format!("layer{layer}.mlp.down"),
                &[d, inner],
                1.0 / (inner as f64).sqrt(),
                false,
            ),
            activation: cfg.activation,
        }
    }

    /// `act(x·W_upᵀ)·W_downᵀ`.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        let up_t = tape.transpose(bind.var(self.w_up))?;
        let down_t = tape.transpose(bind.var(self.w_down))?;
        let h = tape.matmul(x, up_t)?;
        let h = match self.activation {
            Activation::Silu => tape.silu(h),
        };
        tape.matmul(h, down_t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn: AttentionLoraSet,
    pub mlp: BaseMlp,
    pub moe: MoeBlock,
    pub head_a: ProjectionHead,
    pub head_b: ProjectionHead,
}

/// Parameters and structure of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub moe_config: MoeConfig,
    pub contrastive_config: ContrastiveConfig,
    pub store: ParamStore,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<Layer>,
    /// `[vocab, d]`
    pub w_out: ParamId,
}

impl Model {
    /// Builds a model whose every tensor is derived from `config.seed` and
    /// the tensor's name.
    pub fn new(
        config: ModelConfig,
        moe_config: MoeConfig,
        contrastive_config: ContrastiveConfig,
    ) -> Result<Self> {
        config.validate()?;
        moe_config.validate()?;
        contrastive_config.validate()?;
        let seed = config.seed;
        let (d, v) = (config.hidden_dim, config.vocab_size);
        let mut store = ParamStore::new();
        let tok_embed = store.add_randn(seed, "tok_embed", &[v, d], 1.0, false);
        let pos_embed = store.add_randn(
            seed,
            "pos_embed",
            &[config.max_seq_len, d],
            POS_EMBED_STD,
            false,
        );
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let attn = AttentionLoraSet::build(&mut store, &config, l);
            let mlp = BaseMlp::build(&mut store, &config, l);
            let moe = MoeBlock::build(&mut store, seed, &format!("layer{l}.moe"), d, &moe_config);
            let head_a = ProjectionHead::build(
                &mut store,
                seed,
                &format!("layer{l}"),
                HeadId::A,
                d,
                &contrastive_config,
            );
            let head_b = ProjectionHead::build(
                &mut store,
                seed,
                &format!("layer{l}"),
                HeadId::B,
                d,
                &contrastive_config,
            );
            layers.push(Layer {
                attn,
                mlp,
                moe,
                head_a,
                head_b,
            });
        }
        let w_out = store.add_randn(seed, "w_out", &[v, d], 1.0 / (d as f64).sqrt(), false);
        Ok(Self {
            config,
            moe_config,
            contrastive_config,
            store,
            tok_embed,
            pos_embed,
            layers,
            w_out,
        })
    }

    /// Sets every LoRA up-projection (attention and experts) to zero.
    pub fn zero_adapters(&mut self) {
        for id in self.adapter_ups() {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Replaces every LoRA up-projection with seeded N(0, std²) entries, so
    /// that all adapter paths are live (used by gradient checks and tests).
    pub fn perturb_adapters(&mut self, std: f64, seed: u64) {
        for id in self.adapter_ups() {
            let name = self.store.name(id).to_string();
            let mut rng = crate::params::param_rng(seed, &name);
            let shape = self.store.get(id).shape().to_vec();
            let fresh = Tensor::randn(&shape, std, &mut rng);
            self.store
                .get_mut(id)
                .data_mut()
                .copy_from_slice(fresh.data());
        }
    }

    fn adapter_ups(&self) -> Vec<ParamId> {
        let mut ups = Vec::new();
        for layer in &self.layers {
            for p in [&layer.attn.q, &layer.attn.k, &layer.attn.v, &layer.attn.o] {
                if let Some((_, up)) = p.adapter {
                    ups.push(up);
                }
            }
            ups.extend(layer.moe.experts.iter().map(|e| e.up));
        }
        ups
    }
}

/// Token ids laid out `[batch, seq_len]`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq_len: usize) -> Result<Self> {
        if batch == 0 || seq_len == 0 || ids.len() != batch * seq_len {
            return Err(Error::Shape {
                op: "token_batch",
                lhs: vec![batch, seq_len],
                rhs: vec![ids.len()],
            });
        }
        Ok(Self {
            ids,
            batch,
            seq_len,
        })
    }

    pub fn from_rows(rows: &[&[usize]]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::Input("ragged token rows".into()));
        }
        Self::new(rows.concat(), rows.len(), seq_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// `false` runs the frozen backbone only: no attention adapters, no routed experts.
    pub adapters: bool,
    /// Router noise generator for this forward (only used if the router is noisy).
    pub noise: Option<(u64, u64)>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            adapters: true,
            noise: None,
        }
    }
}

impl ForwardOptions {
    pub fn base_only() -> Self {
        Self {
            adapters: false,
            noise: None,
        }
    }
}

/// Per-layer MoE intermediates needed by the auxiliary losses.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub h_route: Var,
    pub h_shared: Var,
    pub routing: RoutingVars,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, T, vocab]`
    pub logits: Var,
    /// Empty when adapters are off.
    pub layers: Vec<LayerTrace>,
}

/// Multi-head causal self-attention with LoRA-merged projections.
pub fn attention_forward(
    tape: &mut Tape,
    bind: &Bindings,
    attn: &AttentionLoraSet,
    num_heads: usize,
    x: Var,
    adapters: bool,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::Shape {
            op: "attention_forward",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    };
    if d % num_heads != 0 {
        return Err(config(format!(
            "hidden dim {d} not divisible by {num_heads} heads"
        )));
    }
    let dh = d / num_heads;
    let project = |tape: &mut Tape, p: &LoraProjection| -> Result<Var> {
        let w = attn.effective(tape, bind, p, adapters)?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        let y = tape.reshape(y, &[b, t, num_heads, dh])?;
        tape.swap_axes(y, 1, 2)
    };
    let q = project(tape, &attn.q)?;
    let k = project(tape, &attn.k)?;
    let v = project(tape, &attn.v)?;

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let causal: Vec<bool> = (0..b * num_heads)
        .flat_map(|_| (0..t).flat_map(move |i| (0..t).map(move |j| j > i)))
        .collect();
    let scores = tape.masked_fill(scores, &causal, MASKED_SCORE)?;
    let probs = tape.softmax(scores);
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.swap_axes(ctx, 1, 2)?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;

    let wo = attn.effective(tape, bind, &attn.o, adapters)?;
    let wo_t = tape.transpose(wo)?;
    tape.matmul(ctx, wo_t)
}

/// Frozen MLP on its own (the shared expert).
pub fn base_mlp_forward(tape: &mut Tape, bind: &Bindings, mlp: &BaseMlp, x: Var) -> Result<Var> {
    mlp.forward(tape, bind, x)
}

/// Embeddings → pre-norm blocks `h += attn(rms(h)); h += moe(rms(h))` →
/// `rms(h)·W_outᵀ`.
///
/// Logits at position `t` score the token at `t + 1`; callers shift targets
/// accordingly.
pub fn lm_forward(
    tape: &mut Tape,
    bind: &Bindings,
    model: &Model,
    tokens: &TokenBatch,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let (b, t, d) = (tokens.batch, tokens.seq_len, cfg.hidden_dim);
    if t > cfg.max_seq_len {
        return Err(config(format!(
            "sequence length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let tok = tape.embedding(bind.var(model.tok_embed), &tokens.ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = tape.embedding(bind.var(model.pos_embed), &positions)?;
    let h = tape.add(tok, pos)?;
    let mut h = tape.reshape(h, &[b, t, d])?;

    let mut traces = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let x = tape.rms_norm(h, RMS_EPS);
        let a = attention_forward(tape, bind, &layer.attn, cfg.num_heads, x, opts.adapters)?;
        h = tape.add(h, a)?;
        let x = tape.rms_norm(h, RMS_EPS);
        let m = if opts.adapters {
            let noise = opts
                .noise
                .map(|(seed, step)| CounterRng::keyed(seed, NOISE_OP_BASE + l as u64, step));
            let out = moe_layer_forward(tape, bind, &layer.moe, &layer.mlp, x, noise)?;
            traces.push(LayerTrace {
                h_route: out.h_route,
                h_shared: out.h_shared,
                routing: out.routing,
            });
            out.h_final
        } else {
            layer.mlp.forward(tape, bind, x)?
        };
        h = tape.add(h, m)?;
    }
    let x = tape.rms_norm(h, RMS_EPS);
    let wt = tape.transpose(bind.var(model.w_out))?;
    let logits = tape.matmul(x, wt)?;
    Ok(ForwardOutput {
        logits,
        layers: traces,
    })
}

/// Operation-id range reserved for router noise streams (one id per layer).
const NOISE_OP_BASE: u64 = 1 << 32;

/// Convenience wrapper: logits as a plain tensor.
pub fn predict_logits(model: &Model, tokens: &TokenBatch, opts: ForwardOptions) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bind = model.store.bind_frozen(&mut tape);
    let out = lm_forward(&mut tape, &bind, model, tokens, opts)?;
    Ok(tape.take_value(out.logits))
}

#[cfg(test)]
mod tests;
