//! Expert-contrastive learning: two projection views of each token's MoE
//! output, per-expert ring buffers of past view-B projections, and an
//! InfoNCE loss that uses queue entries as negatives.

use crate::error::{config, contract, Error, Result};
use crate::moe::RouterOutput;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{CounterRng, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Added under the square root when L2-normalizing, so zero rows map to zero.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Weight of the shared expert in view B.
    pub lambda: f64,
    /// Negatives per step; `None` means half of the global pool, `n·K/2`.
    pub num_negatives: Option<usize>,
    pub normalize: bool,
    /// Ring-buffer length `K` of each expert queue.
    pub queue_len: usize,
    /// Output width `d_h` of both heads.
    pub proj_dim: usize,
    pub dropout: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            lambda: 1.0,
            num_negatives: None,
            normalize: true,
            queue_len: 8,
            proj_dim: 64,
            dropout: 0.1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!(
                "head dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.queue_len == 0 || self.proj_dim == 0 {
            return Err(config("queue_len and proj_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn negatives_for(&self, num_experts: usize) -> usize {
        self.num_negatives
            .unwrap_or(num_experts * self.queue_len / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadId {
    A,
    B,
}

/// `z = W2·relu(W1·drop(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    /// `[h, d]`
    pub w1: ParamId,
    /// `[d_h, h]`
    pub w2: ParamId,
    pub dropout_rate: f64,
    pub head_id: HeadId,
}

impl ProjectionHead {
    /// Hidden width equals the model width.
    pub fn build(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        head_id: HeadId,
        d: usize,
        cfg: &ContrastiveConfig,
    ) -> Self {
        let tag = match head_id {
            HeadId::A => "head_a",
            HeadId::B => "head_b",
        };
        let h = d;
        Self {
            w1: store.add_randn(
                seed,
                &format!("{prefix}.{tag}.w1"),
                &[h, d],
                1.0 / (d as f64).sqrt(),
                true,
            ),
            w2: store.add_randn(
                seed,
                &format!("{prefix}.{tag}.w2"),
                &[cfg.proj_dim, h],
                1.0 / (h as f64).sqrt(),
                true,
            ),
            dropout_rate: cfg.dropout,
            head_id,
        }
    }

    fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var, rng: CounterRng) -> Result<Var> {
        let x = tape.dropout(x, self.dropout_rate, rng)?;
        let w1t = tape.transpose(bind.var(self.w1))?;
        let w2t = tape.transpose(bind.var(self.w2))?;
        let h = tape.matmul(x, w1t)?;
        let h = tape.relu(h);
        tape.matmul(h, w2t)
    }

    fn expect(&self, id: HeadId) -> Result<()> {
        if self.head_id == id {
            Ok(())
        } else {
            Err(contract(format!(
                "expected head {id:?}, got {:?}",
                self.head_id
            )))
        }
    }
}

/// Routed-expert view: `W2·relu(W1·drop(H_route))`.
pub fn project_view_a(
    tape: &mut Tape,
    bind: &Bindings,
    head: &ProjectionHead,
    h_route: Var,
    rng: CounterRng,
) -> Result<Var> {
    head.expect(HeadId::A)?;
    head.forward(tape, bind, h_route, rng)
}

/// Fused view: `W2·relu(W1·drop(H_route + λ·H_shared))`.
pub fn project_view_b(
    tape: &mut Tape,
    bind: &Bindings,
    head: &ProjectionHead,
    h_route: Var,
    h_shared: Var,
    lambda: f64,
    rng: CounterRng,
) -> Result<Var> {
    head.expect(HeadId::B)?;
    let fused = if lambda == 0.0 {
        h_route
    } else {
        let s = tape.scale(h_shared, lambda);
        tape.add(h_route, s)?
    };
    head.forward(tape, bind, fused, rng)
}

/// Fixed-capacity ring buffer of detached projection rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMemoryQueue {
    /// `[K, d_h]`; rows at or beyond `filled` are unused.
    pub buffer: Tensor,
    pub write_ptr: usize,
    pub filled: usize,
}

impl ExpertMemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            buffer: Tensor::zeros(&[capacity, dim]),
            write_ptr: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.buffer.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.buffer.shape()[1]
    }

    /// Writes at the pointer, overwriting the oldest entry once full.
    pub fn push(&mut self, row: &[f64]) {
        let d = self.dim();
        debug_assert_eq!(row.len(), d);
        self.buffer.data_mut()[self.write_ptr * d..(self.write_ptr + 1) * d].copy_from_slice(row);
        self.write_ptr = (self.write_ptr + 1) % self.capacity();
        self.filled = (self.filled + 1).min(self.capacity());
    }

    /// Valid rows in buffer order.
    pub fn valid_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.buffer
            .data()
            .chunks_exact(self.dim())
            .take(self.filled)
    }
}

/// One queue per expert of a single MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueBank {
    pub queues: Vec<ExpertMemoryQueue>,
}

impl QueueBank {
    pub fn new(num_experts: usize, capacity: usize, dim: usize) -> Self {
        Self {
            queues: (0..num_experts)
                .map(|_| ExpertMemoryQueue::new(capacity, dim))
                .collect(),
        }
    }

    pub fn total_filled(&self) -> usize {
        self.queues.iter().map(|q| q.filled).sum()
    }

    /// Floats held by all buffers, `n·K·d_h`.
    pub fn storage_floats(&self) -> usize {
        self.queues.iter().map(|q| q.buffer.numel()).sum()
    }

    /// Pushes each row of `z_b` into the queue of its token's highest-gate
    /// expert (lowest index on ties).
    pub fn enqueue(&mut self, z_b: &Tensor, routing: &RouterOutput) -> Result<()> {
        let dim = self.queues.first().map_or(0, ExpertMemoryQueue::dim);
        let rows = z_b.numel() / z_b.last_dim();
        if z_b.last_dim() != dim
            || rows != routing.num_tokens()
            || routing.num_experts() != self.queues.len()
        {
            return Err(Error::Shape {
                op: "enqueue",
                lhs: z_b.shape().to_vec(),
                rhs: routing.gates.shape().to_vec(),
            });
        }
        self.push_tokens(z_b.data(), routing.gates.data());
        Ok(())
    }

    /// Flat form of [`enqueue`](Self::enqueue): `z` holds `d_h`-wide rows and
    /// `gates` the matching `n`-wide gate rows. Empty input is a no-op.
    pub fn push_tokens(&mut self, z: &[f64], gates: &[f64]) {
        let (Some(first), n) = (self.queues.first(), self.queues.len()) else {
            return;
        };
        let d = first.dim();
        for (row, g) in z.chunks_exact(d).zip(gates.chunks_exact(n)) {
            let winner = argmax(g);
            self.queues[winner].push(row);
        }
    }

    /// Up to `m` distinct valid rows drawn uniformly from all queues, or
    /// `None` when every queue is empty or `m == 0`.
    pub fn sample_negatives(&self, m: usize, seed: u64) -> Option<Tensor> {
        let pool: Vec<&[f64]> = self
            .queues
            .iter()
            .flat_map(ExpertMemoryQueue::valid_rows)
            .collect();
        let take = m.min(pool.len());
        if take == 0 {
            return None;
        }
        let dim = pool[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, pool.len(), take);
        let data = picked
            .iter()
            .flat_map(|i| pool[i].iter().copied())
            .collect();
        Some(Tensor::new(&[take, dim], data).expect("non-empty sample"))
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let mut out = t.detached();
    let d = t.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        let r = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= r);
    }
    out
}

/// InfoNCE with one positive per row and shared queue negatives:
/// `mean_i −log_softmax([s(a_i,b_i), s(a_i,q_1..M)] / τ)[0]`.
///
/// `z_a`, `z_b` may have any leading shape; they are flattened to `[N, d_h]`.
/// Negatives are constants. Returns exactly 0 when there are none (absent
/// or zero rows).
pub fn info_nce(
    tape: &mut Tape,
    z_a: Var,
    z_b: Var,
    negatives: Option<&Tensor>,
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(config(format!("temperature must be > 0, got {tau}")));
    }
    let (sa, sb) = (tape.shape(z_a).to_vec(), tape.shape(z_b).to_vec());
    if sa != sb {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: sa,
            rhs: sb,
        });
    }
    let dh = *sa.last().unwrap();
    let n = sa.iter().product::<usize>() / dh.max(1);
    if n == 0 || dh == 0 {
        return Err(contract(format!("info_nce on empty projections {sa:?}")));
    }
    let Some(q) = negatives.filter(|q| q.numel() > 0) else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    if q.last_dim() != dh {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: sa,
            rhs: q.shape().to_vec(),
        });
    }
    let mut za = tape.reshape(z_a, &[n, dh])?;
    let mut zb = tape.reshape(z_b, &[n, dh])?;
    let q = if normalize {
        za = tape.l2_normalize(za, NORMALIZE_EPS);
        zb = tape.l2_normalize(zb, NORMALIZE_EPS);
        normalize_rows(q)
    } else {
        q.detached()
    };
    let prod = tape.mul(za, zb)?;
    let pos = tape.sum_axis(prod, 1)?;
    let pos = tape.reshape(pos, &[n, 1])?;
    let qt = tape.constant(q.transposed());
    let neg = tape.matmul(za, qt)?;
    let logits = tape.concat(&[pos, neg])?;
    let logits = tape.scale(logits, 1.0 / tau);
    let logp = tape.log_softmax(logits);
    let picked = tape.select_last(logp, &vec![0; n])?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Plain-value [`info_nce`].
pub fn info_nce_value(
    z_a: &Tensor,
    z_b: &Tensor,
    negatives: Option<&Tensor>,
    tau: f64,
    normalize: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z_a.detached());
    let b = tape.constant(z_b.detached());
    let l = info_nce(&mut tape, a, b, negatives, tau, normalize)?;
    Ok(tape.value(l).item())
}
