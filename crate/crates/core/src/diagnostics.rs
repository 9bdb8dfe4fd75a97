//! Routing diagnostics, benchmark aggregation and multiple-choice probing.

use crate::error::{contract, Error, Result};
use crate::model::{lm_forward, ForwardOptions, Model, TokenBatch};
use crate::moe::{routing_stats, RouterOutput};
use crate::tensor::Tape;
use crate::training::corpus::{Example, Probe, NUM_OPTIONS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Mean over tokens of the largest gate.
pub fn mean_max_gate(out: &RouterOutput) -> f64 {
    let (sum, count) = out.gate_rows().fold((0.0, 0usize), |(s, c), row| {
        (
            s + row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            c + 1,
        )
    });
    sum / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub global_conf: f64,
    pub per_layer_conf: Vec<f64>,
    pub token_count: usize,
}

/// Gates produced by one layer for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub layer: usize,
    pub output: RouterOutput,
}

/// Expected maximum gate, overall and per layer, over a stream of records.
pub fn routing_confidence(records: &[GateRecord], num_layers: usize) -> Result<ConfidenceReport> {
    let mut sums = vec![0.0; num_layers];
    let mut counts = vec![0usize; num_layers];
    for r in records {
        if r.layer >= num_layers {
            return Err(contract(format!(
                "gate record for layer {} of {num_layers}",
                r.layer
            )));
        }
        let n = r.output.num_tokens();
        sums[r.layer] += mean_max_gate(&r.output) * n as f64;
        counts[r.layer] += n;
    }
    let token_count: usize = counts.iter().sum();
    if token_count == 0 {
        return Err(contract("routing confidence needs at least one token"));
    }
    if let Some(l) = counts.iter().position(|&c| c == 0) {
        return Err(contract(format!("no gate records for layer {l}")));
    }
    Ok(ConfidenceReport {
        global_conf: sums.iter().sum::<f64>() / token_count as f64,
        per_layer_conf: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s / c as f64)
            .collect(),
        token_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScore {
    pub name: String,
    pub count: u64,
    /// Percent, in `[0, 100]`.
    pub accuracy: f64,
}

/// `Σ N_i·Acc_i / Σ N_i`.
pub fn weighted_average(scores: &[BenchmarkScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(contract("weighted average of an empty score list"));
    }
    for s in scores {
        if s.count == 0 {
            return Err(Error::Input(format!(
                "benchmark `{}` has zero items",
                s.name
            )));
        }
        if !(0.0..=100.0).contains(&s.accuracy) {
            return Err(Error::Input(format!(
                "benchmark `{}` accuracy {} outside [0, 100]",
                s.name, s.accuracy
            )));
        }
    }
    let total: f64 = scores.iter().map(|s| s.count as f64).sum();
    Ok(scores
        .iter()
        .map(|s| s.count as f64 * s.accuracy)
        .sum::<f64>()
        / total)
}

/// Parses `name count accuracy` lines (whitespace or comma separated;
/// blank lines and `#` comments ignored).
pub fn parse_scores(text: &str) -> Result<Vec<BenchmarkScore>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let [name, count, acc] = fields[..] else {
            return Err(Error::Parse(format!(
                "line {}: expected `name count accuracy`",
                no + 1
            )));
        };
        let count = count
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad count `{count}`", no + 1)))?;
        let accuracy = acc
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad accuracy `{acc}`", no + 1)))?;
        out.push(BenchmarkScore {
            name: name.to_string(),
            count,
            accuracy,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
    pub skipped: usize,
}

fn probe_is_valid(p: &Probe, model: &Model) -> bool {
    let v = model.config.vocab_size;
    !p.prompt.is_empty()
        && p.prompt.len() <= model.config.max_seq_len
        && p.candidates.len() == NUM_OPTIONS
        && p.prompt.iter().chain(&p.candidates).all(|&t| t < v)
        && p.candidates.contains(&p.answer)
}

/// Greedy choice among each probe's candidates at the position after the
/// prompt; accuracy over well-formed probes.
pub fn toy_mc_eval(model: &Model, probes: &[Probe]) -> Result<McEvalReport> {
    const CHUNK: usize = 32;
    let mut by_len: BTreeMap<usize, Vec<&Probe>> = BTreeMap::new();
    let mut skipped = 0;
    for p in probes {
        if probe_is_valid(p, model) {
            by_len.entry(p.prompt.len()).or_default().push(p);
        } else {
            skipped += 1;
        }
    }
    let (mut correct, mut evaluated) = (0, 0);
    for (len, group) in by_len {
        for chunk in group.chunks(CHUNK) {
            let rows: Vec<&[usize]> = chunk.iter().map(|p| p.prompt.as_slice()).collect();
            let tokens = TokenBatch::from_rows(&rows)?;
            let mut tape = Tape::new();
            let bind = model.store.bind_frozen(&mut tape);
            let out = lm_forward(&mut tape, &bind, model, &tokens, ForwardOptions::default())?;
            let logits = tape.value(out.logits);
            let v = logits.last_dim();
            for (b, p) in chunk.iter().enumerate() {
                let row = &logits.data()[(b * len + len - 1) * v..(b * len + len) * v];
                let choice = p
                    .candidates
                    .iter()
                    .copied()
                    .fold(None::<usize>, |best, c| match best {
                        Some(bc) if row[bc] >= row[c] => Some(bc),
                        _ => Some(c),
                    })
                    .expect("four candidates");
                correct += usize::from(choice == p.answer);
                evaluated += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(contract(format!(
            "no well-formed probes ({skipped} skipped)"
        )));
    }
    Ok(McEvalReport {
        accuracy: correct as f64 / evaluated as f64,
        correct,
        evaluated,
        skipped,
    })
}

/// Normalized mutual information with arithmetic-mean normalization,
/// `I(X;Y) / ((H(X) + H(Y)) / 2)`. Two constant labelings score 1.
pub fn normalized_mutual_information(xs: &[usize], ys: &[usize]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(contract("NMI needs two equally long, non-empty labelings"));
    }
    let n = xs.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut px: BTreeMap<usize, f64> = BTreeMap::new();
    let mut py: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in xs.iter().zip(ys) {
        *joint.entry((x, y)).or_default() += 1.0;
        *px.entry(x).or_default() += 1.0;
        *py.entry(y).or_default() += 1.0;
    }
    let entropy =
        |m: &BTreeMap<usize, f64>| -> f64 { m.values().map(|c| -(c / n) * (c / n).ln()).sum() };
    let (hx, hy) = (entropy(&px), entropy(&py));
    if hx == 0.0 && hy == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let p = c / n;
            p * (p * n * n / (px[&x] * py[&y])).ln()
        })
        .sum();
    Ok((mi / ((hx + hy) / 2.0)).clamp(0.0, 1.0))
}

/// Routing behaviour of a model over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingProfile {
    pub confidence: ConfidenceReport,
    /// Mean gate per expert, per layer.
    pub p_bar: Vec<Vec<f64>>,
    /// Share of tokens whose largest gate is each expert, per layer.
    pub argmax_share: Vec<Vec<f64>>,
    /// NMI between task id and last-layer argmax expert over all tokens.
    pub task_expert_nmi: f64,
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

/// Deterministic forward over `examples` (noise and dropout off).
pub fn routing_profile(
    model: &Model,
    examples: &[Example],
    batch_size: usize,
) -> Result<RoutingProfile> {
    if examples.is_empty() {
        return Err(contract("routing profile of an empty dataset"));
    }
    let layers = model.config.num_layers;
    let n = model.moe_config.num_experts;
    let mut records = Vec::new();
    let mut p_sum = vec![vec![0.0; n]; layers];
    let mut argmax_counts = vec![vec![0usize; n]; layers];
    let mut tasks = Vec::new();
    let mut last_experts = Vec::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let rows: Vec<&[usize]> = chunk.iter().map(Example::inputs).collect();
        let tokens = TokenBatch::from_rows(&rows)?;
        let mut tape = Tape::new();
        let bind = model.store.bind_frozen(&mut tape);
        let out = lm_forward(&mut tape, &bind, model, &tokens, ForwardOptions::default())?;
        for (l, trace) in out.layers.iter().enumerate() {
            let routing = trace.routing.to_output(&tape);
            let tokens_here = routing.num_tokens() as f64;
            for (acc, p) in p_sum[l].iter_mut().zip(routing_stats(&routing).data()) {
                *acc += p * tokens_here;
            }
            for row in routing.gate_rows() {
                let e = argmax(row);
                argmax_counts[l][e] += 1;
                if l + 1 == layers {
                    last_experts.push(e);
                }
            }
            records.push(GateRecord {
                layer: l,
                output: routing,
            });
        }
        for e in chunk {
            tasks.extend(std::iter::repeat_n(e.task_id, e.inputs().len()));
        }
    }
    let confidence = routing_confidence(&records, layers)?;
    let total = confidence.token_count as f64 / layers as f64;
    Ok(RoutingProfile {
        p_bar: p_sum
            .into_iter()
            .map(|row| row.into_iter().map(|v| v / total).collect())
            .collect(),
        argmax_share: argmax_counts
            .into_iter()
            .map(|row| row.into_iter().map(|c| c as f64 / total).collect())
            .collect(),
        task_expert_nmi: normalized_mutual_information(&tasks, &last_experts)?,
        confidence,
    })
}
