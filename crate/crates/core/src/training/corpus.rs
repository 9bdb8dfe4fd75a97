//! Synthetic multi-task corpus: each task is a first-order Markov chain over
//! its own disjoint block of the vocabulary.
//!
//! Vocabulary layout: ids `0..NUM_SPECIAL` are markers, the rest is split
//! into `num_tasks` equal blocks (any remainder is unused). Every token has
//! [`SUCCESSOR_PROBS`]`.len()` distinct successors inside its block.
//!
//! Multiple-choice probes are laid out as
//! `[OPTS c0 c1 c2 c3 QUESTION x1 .. xm]` followed by the answer, the most
//! likely successor of `xm`; the other three candidates are tokens of the
//! same block that never follow `xm`.

use crate::error::{config, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const OPTS_TOKEN: usize = 0;
pub const QUESTION_TOKEN: usize = 1;
pub const NUM_SPECIAL: usize = 4;
pub const NUM_OPTIONS: usize = 4;
/// Transition probabilities of a token's successors, most likely first.
pub const SUCCESSOR_PROBS: [f64; 4] = [0.5, 0.25, 0.15, 0.10];
/// Prompt positions taken by the probe header (`OPTS`, 4 options, `QUESTION`).
const PROBE_HEADER: usize = 2 + NUM_OPTIONS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub num_tasks: usize,
    pub vocab_size: usize,
    pub num_sequences: usize,
    /// Model input length; stored sequences carry one extra token.
    pub seq_len: usize,
    pub probe_fraction: f64,
    /// Seed of the transition tables, kept apart from the sampling seed so
    /// train, held-out and probe sets share one set of tasks.
    pub table_seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            vocab_size: 256,
            num_sequences: 2048,
            seq_len: 32,
            probe_fraction: 0.25,
            table_seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.num_sequences == 0 {
            return Err(config("num_tasks and num_sequences must be >= 1"));
        }
        let block = self.block_size();
        if block < SUCCESSOR_PROBS.len() + NUM_OPTIONS {
            return Err(config(format!(
                "vocabulary of {} leaves {} tokens per task; need at least {}",
                self.vocab_size,
                block,
                SUCCESSOR_PROBS.len() + NUM_OPTIONS
            )));
        }
        if self.seq_len < PROBE_HEADER + 1 {
            return Err(config(format!("seq_len must be >= {}", PROBE_HEADER + 1)));
        }
        if !(0.0..=1.0).contains(&self.probe_fraction) {
            return Err(config("probe_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.vocab_size.saturating_sub(NUM_SPECIAL) / self.num_tasks.max(1)
    }

    /// First id of a task's vocabulary block.
    pub fn block_start(&self, task: usize) -> usize {
        NUM_SPECIAL + task * self.block_size()
    }
}

/// One task's Markov chain in local (block-relative) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    pub start: usize,
    /// `successors[i]` lists the successors of token `start + i` as global ids.
    pub successors: Vec<[usize; 4]>,
}

impl TransitionTable {
    pub fn len(&self) -> usize {
        self.successors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.successors.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.start + self.len()).contains(&token)
    }

    /// `P(next | token)` over the whole vocabulary slice of the block.
    pub fn prob(&self, token: usize, next: usize) -> f64 {
        self.successors[token - self.start]
            .iter()
            .zip(SUCCESSOR_PROBS)
            .filter(|(&s, _)| s == next)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn top_successor(&self, token: usize) -> usize {
        self.successors[token - self.start][0]
    }

    fn step<R: Rng>(&self, token: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let succ = &self.successors[token - self.start];
        for (s, p) in succ.iter().zip(SUCCESSOR_PROBS) {
            acc += p;
            if u < acc {
                return *s;
            }
        }
        succ[succ.len() - 1]
    }

    /// A chain of `len` tokens from a uniformly drawn start state.
    pub fn sample_chain<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut t = self.start + rng.random_range(0..self.len());
        for _ in 0..len {
            out.push(t);
            t = self.step(t, rng);
        }
        out
    }
}

/// Training sequence: `tokens` has `seq_len + 1` ids; `loss_mask[t]` says
/// whether predicting `tokens[t + 1]` from position `t` is supervised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub task_id: usize,
}

impl Example {
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }
}

/// Four-option multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub prompt: Vec<usize>,
    pub candidates: Vec<usize>,
    pub answer: usize,
    pub task_id: usize,
}

impl Probe {
    /// Prompt plus answer, supervised only on the answer.
    pub fn to_example(&self) -> Example {
        let mut tokens = self.prompt.clone();
        tokens.push(self.answer);
        let mut loss_mask = vec![false; self.prompt.len()];
        *loss_mask.last_mut().expect("non-empty prompt") = true;
        Example {
            tokens,
            loss_mask,
            task_id: self.task_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub tables: Vec<TransitionTable>,
    pub examples: Vec<Example>,
}

/// Transition tables implied by `spec.table_seed`.
pub fn build_tables(spec: &SyntheticCorpusSpec) -> Result<Vec<TransitionTable>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.table_seed);
    let block = spec.block_size();
    Ok((0..spec.num_tasks)
        .map(|task| {
            let start = spec.block_start(task);
            let successors = (0..block)
                .map(|_| {
                    let picked = rand::seq::index::sample(&mut rng, block, SUCCESSOR_PROBS.len());
                    let mut s = [0; 4];
                    for (slot, i) in s.iter_mut().zip(picked.iter()) {
                        *slot = start + i;
                    }
                    s
                })
                .collect();
            TransitionTable { start, successors }
        })
        .collect())
}

impl SyntheticCorpus {
    pub fn task_of(&self, token: usize) -> Option<usize> {
        self.tables.iter().position(|t| t.contains(token))
    }

    /// A probe from `task`'s chain; the prompt is exactly `seq_len` long.
    pub fn make_probe<R: Rng>(&self, task: usize, rng: &mut R) -> Probe {
        let table = &self.tables[task];
        let question = table.sample_chain(self.spec.seq_len - PROBE_HEADER, rng);
        let last = *question.last().expect("seq_len > header");
        let answer = table.top_successor(last);
        let succ = &table.successors[last - table.start];
        let pool: Vec<usize> = (table.start..table.start + table.len())
            .filter(|t| !succ.contains(t))
            .collect();
        let mut candidates: Vec<usize> = pool
            .choose_multiple(rng, NUM_OPTIONS - 1)
            .copied()
            .collect();
        candidates.push(answer);
        candidates.shuffle(rng);
        let mut prompt = Vec::with_capacity(self.spec.seq_len);
        prompt.push(OPTS_TOKEN);
        prompt.extend(&candidates);
        prompt.push(QUESTION_TOKEN);
        prompt.extend(question);
        Probe {
            prompt,
            candidates,
            answer,
            task_id: task,
        }
    }

    /// `count` probes with tasks assigned round-robin.
    pub fn probes(&self, count: usize, seed: u64) -> Vec<Probe> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| self.make_probe(i % self.spec.num_tasks, &mut rng))
            .collect()
    }

    /// Fresh examples drawn like the training set but from another seed.
    pub fn sample_examples(&self, count: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_example(&mut rng)).collect()
    }

    fn sample_example<R: Rng>(&self, rng: &mut R) -> Example {
        let task = rng.random_range(0..self.spec.num_tasks);
        if rng.random::<f64>() < self.spec.probe_fraction {
            return self.make_probe(task, rng).to_example();
        }
        Example {
            tokens: self.tables[task].sample_chain(self.spec.seq_len + 1, rng),
            loss_mask: vec![true; self.spec.seq_len],
            task_id: task,
        }
    }
}

/// Deterministic corpus for `seed`; tables come from `spec.table_seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> Result<SyntheticCorpus> {
    let tables = build_tables(spec)?;
    let mut corpus = SyntheticCorpus {
        spec: spec.clone(),
        tables,
        examples: Vec::new(),
    };
    corpus.examples = corpus.sample_examples(spec.num_sequences, seed);
    Ok(corpus)
}
