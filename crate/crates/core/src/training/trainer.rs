//! The joint-objective training loop.
//!
//! One step draws `batch_size · grad_accum` examples, runs each micro-batch
//! through the model, and backpropagates
//! `(lm + α_bal·balance + β·contrastive) / grad_accum`. Gradients are summed
//! over micro-batches, clipped, applied with AdamW, and only then are the
//! step's detached view-B projections pushed into the expert queues.

use super::corpus::{generate_synthetic_corpus, Example, SyntheticCorpus, SyntheticCorpusSpec};
use super::optim::{adamw_step, clip_global_norm, global_norm, AdamW, OptimizerState};
use super::schedule::lr_at;
use super::TrainConfig;
use crate::config::RunConfig;
use crate::contrastive::{info_nce, project_view_a, project_view_b, QueueBank};
use crate::diagnostics::mean_max_gate;
use crate::error::{contract, Result};
use crate::losses::{balance_loss, lm_loss, total_loss, total_loss_var, LossBreakdown};
use crate::model::{lm_forward, ForwardOptions, Model, TokenBatch};
use crate::moe::{mean_gates, routing_stats, RouterOutput};
use crate::params::Bindings;
use crate::tensor::{mix64, CounterRng, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// Stream tags separating the independent random draws of a run.
const BATCH_STREAM: u64 = 0xB47C;
const NEGATIVE_STREAM: u64 = 0x4E67;
const CORPUS_STREAM: u64 = 0xC0;
const HELDOUT_STREAM: u64 = 0x4E1D;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lm: f64,
    pub balance: f64,
    pub contrastive: f64,
    pub total: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub conf_mean: f64,
    pub conf_per_layer: Vec<f64>,
    pub p_bar: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_lm: Option<f64>,
}

impl MetricsRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            lm: self.lm,
            balance: self.balance,
            contrastive: self.contrastive,
            total: self.total,
        }
    }
}

/// Mutable training state plus the data it trains on.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub corpus: SyntheticCorpus,
    pub heldout: Vec<Example>,
    pub optimizer: OptimizerState,
    /// One bank per MoE layer.
    pub queues: Vec<QueueBank>,
    /// Index of the next step to run.
    pub step: usize,
}

struct MicroResult {
    breakdown: LossBreakdown,
    conf: Vec<f64>,
    p_bar: Vec<Vec<f64>>,
    pending: Vec<(Tensor, RouterOutput)>,
}

/// Flattened inputs, shifted targets and mask of a list of examples.
pub fn collate(examples: &[&Example]) -> Result<(TokenBatch, Vec<usize>, Vec<bool>)> {
    let rows: Vec<&[usize]> = examples.iter().map(|e| e.inputs()).collect();
    let tokens = TokenBatch::from_rows(&rows)?;
    let targets = examples
        .iter()
        .flat_map(|e| e.targets().iter().copied())
        .collect();
    let mask = examples
        .iter()
        .flat_map(|e| e.loss_mask.iter().copied())
        .collect();
    Ok((tokens, targets, mask))
}

impl Trainer {
    pub fn new(
        model: Model,
        config: TrainConfig,
        corpus_spec: &SyntheticCorpusSpec,
    ) -> Result<Self> {
        config.validate()?;
        if corpus_spec.seq_len > model.config.max_seq_len {
            return Err(crate::error::config(format!(
                "corpus seq_len {} exceeds max_seq_len {}",
                corpus_spec.seq_len, model.config.max_seq_len
            )));
        }
        if corpus_spec.vocab_size > model.config.vocab_size {
            return Err(crate::error::config(
                "corpus vocabulary larger than the model's",
            ));
        }
        let corpus = generate_synthetic_corpus(corpus_spec, mix64(config.seed ^ CORPUS_STREAM))?;
        let heldout = corpus.sample_examples(
            config.eval_batches * config.batch_size,
            mix64(config.seed ^ HELDOUT_STREAM),
        );
        let optimizer = OptimizerState::new(&model.store);
        let cc = &model.contrastive_config;
        let queues = (0..model.config.num_layers)
            .map(|_| QueueBank::new(model.moe_config.num_experts, cc.queue_len, cc.proj_dim))
            .collect();
        Ok(Self {
            model,
            config,
            corpus,
            heldout,
            optimizer,
            queues,
            step: 0,
        })
    }

    /// Builds the model and trainer described by a run configuration.
    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.moe.clone(), cfg.contrastive.clone())?;
        Self::new(model, cfg.train.clone(), &cfg.corpus)
    }

    /// The configuration that reproduces this trainer from scratch.
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.config.clone(),
            moe: self.model.moe_config.clone(),
            contrastive: self.model.contrastive_config.clone(),
            train: self.config.clone(),
            corpus: self.corpus.spec.clone(),
        }
    }

    pub fn adam(&self) -> AdamW {
        AdamW {
            beta1: self.config.betas.0,
            beta2: self.config.betas.1,
            eps: self.config.adam_eps,
            weight_decay: self.config.weight_decay,
        }
    }

    /// Example indices for every micro-batch of `step`, in order.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix64(self.config.seed ^ BATCH_STREAM) ^ step as u64);
        let n = self.corpus.examples.len();
        (0..self.config.batch_size * self.config.grad_accum)
            .map(|_| rng.random_range(0..n))
            .collect()
    }

    /// Negatives for every layer at `step`; shared by all its micro-batches.
    pub fn negatives(&self, step: usize) -> Vec<Option<Tensor>> {
        let m = self
            .model
            .contrastive_config
            .negatives_for(self.model.moe_config.num_experts);
        self.queues
            .iter()
            .enumerate()
            .map(|(l, bank)| {
                bank.sample_negatives(
                    m,
                    mix64(mix64(self.config.seed ^ NEGATIVE_STREAM) ^ step as u64) ^ l as u64,
                )
            })
            .collect()
    }

    /// Records the full objective for one micro-batch on `tape`.
    ///
    /// `counter` identifies the micro-batch for dropout and router noise.
    /// Returns the total loss variable together with the per-layer
    /// projections and routing needed for enqueueing.
    pub fn objective(
        &self,
        tape: &mut Tape,
        bind: &Bindings,
        examples: &[&Example],
        negatives: &[Option<Tensor>],
        counter: u64,
    ) -> Result<(Var, LossBreakdown, Vec<(Var, RouterOutput)>)> {
        let model = &self.model;
        let cc = &model.contrastive_config;
        let seed = self.config.seed;
        let (tokens, targets, mask) = collate(examples)?;
        let out = lm_forward(
            tape,
            bind,
            model,
            &tokens,
            ForwardOptions {
                adapters: true,
                noise: Some((seed, counter)),
            },
        )?;
        let lm = lm_loss(tape, out.logits, &targets, &mask)?;
        let layers = out.layers.len() as f64;
        let mut bal_sum: Option<Var> = None;
        let mut co_sum: Option<Var> = None;
        let mut views = Vec::with_capacity(out.layers.len());
        for (l, (trace, layer)) in out.layers.iter().zip(&model.layers).enumerate() {
            let p = mean_gates(tape, trace.routing.gates)?;
            let b = balance_loss(tape, p)?;
            let op = 2 * l as u64;
            let za = project_view_a(
                tape,
                bind,
                &layer.head_a,
                trace.h_route,
                CounterRng::keyed(seed, op, counter),
            )?;
            let zb = project_view_b(
                tape,
                bind,
                &layer.head_b,
                trace.h_route,
                trace.h_shared,
                cc.lambda,
                CounterRng::keyed(seed, op + 1, counter),
            )?;
            let c = info_nce(
                tape,
                za,
                zb,
                negatives[l].as_ref(),
                cc.temperature,
                cc.normalize,
            )?;
            bal_sum = Some(match bal_sum {
                None => b,
                Some(acc) => tape.add(acc, b)?,
            });
            co_sum = Some(match co_sum {
                None => c,
                Some(acc) => tape.add(acc, c)?,
            });
            views.push((zb, trace.routing.to_output(tape)));
        }
        let (bal, co) = match (bal_sum, co_sum) {
            (Some(b), Some(c)) => (tape.scale(b, 1.0 / layers), tape.scale(c, 1.0 / layers)),
            _ => return Err(contract("model has no MoE layers")),
        };
        let (total, breakdown) = total_loss_var(tape, lm, bal, co, self.config.loss_weights)?;
        Ok((total, breakdown, views))
    }

    fn micro_step(
        &self,
        examples: &[&Example],
        negatives: &[Option<Tensor>],
        counter: u64,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<MicroResult> {
        let mut tape = Tape::new();
        let bind = self.model.store.bind(&mut tape);
        let (total, breakdown, views) =
            self.objective(&mut tape, &bind, examples, negatives, counter)?;
        let scaled = tape.scale(total, 1.0 / self.config.grad_accum as f64);
        tape.backward(scaled)?;
        for (acc, g) in grads.iter_mut().zip(bind.grads(&tape)) {
            if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
        let mut conf = Vec::with_capacity(views.len());
        let mut p_bar = Vec::with_capacity(views.len());
        let mut pending = Vec::with_capacity(views.len());
        for (zb, routing) in views {
            conf.push(mean_max_gate(&routing));
            p_bar.push(routing_stats(&routing).into_data());
            pending.push((tape.value(zb).detached(), routing));
        }
        Ok(MicroResult {
            breakdown,
            conf,
            p_bar,
            pending,
        })
    }

    /// Runs the next optimization step. On error the state is left exactly
    /// as it was before the call.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let s = self.step;
        if s >= self.config.total_steps {
            return Err(contract(format!("training already finished at step {s}")));
        }
        let lr = lr_at(s, &self.config)?;
        let accum = self.config.grad_accum;
        let bs = self.config.batch_size;
        let indices = self.batch_indices(s);
        let negatives = self.negatives(s);
        let mut grads: Vec<Option<Vec<f64>>> = self
            .model
            .store
            .iter()
            .map(|(_, p)| p.trainable().then(|| vec![0.0; p.tensor.numel()]))
            .collect();

        let mut micro = Vec::with_capacity(accum);
        for m in 0..accum {
            let examples: Vec<&Example> = indices[m * bs..(m + 1) * bs]
                .iter()
                .map(|&i| &self.corpus.examples[i])
                .collect();
            let counter = (s * accum + m) as u64;
            micro.push(self.micro_step(&examples, &negatives, counter, &mut grads)?);
        }

        let mean = |f: &dyn Fn(&LossBreakdown) -> f64| {
            micro.iter().map(|r| f(&r.breakdown)).sum::<f64>() / accum as f64
        };
        let breakdown = total_loss(
            mean(&|b| b.lm),
            mean(&|b| b.balance),
            mean(&|b| b.contrastive),
            self.config.loss_weights,
        )?;
        let layers = self.queues.len();
        let conf_per_layer: Vec<f64> = (0..layers)
            .map(|l| micro.iter().map(|r| r.conf[l]).sum::<f64>() / accum as f64)
            .collect();
        let p_bar: Vec<Vec<f64>> = (0..layers)
            .map(|l| {
                let n = micro[0].p_bar[l].len();
                (0..n)
                    .map(|i| micro.iter().map(|r| r.p_bar[l][i]).sum::<f64>() / accum as f64)
                    .collect()
            })
            .collect();

        let grad_norm = global_norm(&grads);
        clip_global_norm(&mut grads, self.config.clip_norm);
        let hp = self.adam();
        // Validate on a scratch copy so a failure leaves the trainer untouched.
        let mut store = self.model.store.clone();
        let mut opt = self.optimizer.clone();
        adamw_step(&mut store, &grads, &mut opt, lr, &hp)?;
        self.model.store = store;
        self.optimizer = opt;

        for r in &micro {
            for (bank, (zb, routing)) in self.queues.iter_mut().zip(&r.pending) {
                bank.enqueue(zb, routing)?;
            }
        }
        self.step += 1;

        let eval_lm = if self.step % self.config.eval_every == 0 {
            Some(self.heldout_loss()?)
        } else {
            None
        };
        Ok(MetricsRecord {
            step: s,
            lm: breakdown.lm,
            balance: breakdown.balance,
            contrastive: breakdown.contrastive,
            total: breakdown.total,
            lr,
            grad_norm,
            conf_mean: conf_per_layer.iter().sum::<f64>() / layers as f64,
            conf_per_layer,
            p_bar,
            eval_lm,
        })
    }

    /// Mean LM loss over the held-out set (no dropout, no router noise).
    pub fn heldout_loss(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in self.heldout.chunks(self.config.batch_size) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let (tokens, targets, mask) = collate(&refs)?;
            let mut tape = Tape::new();
            let bind = self.model.store.bind_frozen(&mut tape);
            let out = lm_forward(
                &mut tape,
                &bind,
                &self.model,
                &tokens,
                ForwardOptions::default(),
            )?;
            let l = lm_loss(&mut tape, out.logits, &targets, &mask)?;
            sum += tape.value(l).item();
            batches += 1;
        }
        Ok(sum / batches as f64)
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.total_steps
    }
}
