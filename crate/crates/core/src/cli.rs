//! Command implementations behind the `lora-moe` binary.

use crate::checkpoint::{load_trainer, save_trainer};
use crate::config::RunConfig;
use crate::diagnostics::{parse_scores, routing_profile, toy_mc_eval, weighted_average};
use crate::error::{Error, Result};
use crate::tensor::mix64;
use crate::training::{joint_objective_gradcheck, Example, Probe, Trainer};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_GOOD_FILE: &str = "last_good.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Sparse LoRA mixture-of-experts with expert-contrastive training.
#[derive(Debug, Parser)]
#[command(name = "lora-moe", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic corpus; writes metrics, checkpoints and a manifest to --out.
    Train {
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; --config, if given, must match it.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Toy multiple-choice accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Probe file (JSON lines); generated from the checkpoint's corpus when omitted.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Routing confidence, utilization and specialization records (JSON lines).
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        /// Example file (JSON lines); sampled from the checkpoint's corpus when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the joint objective on a small model.
    Gradcheck {
        /// Defaults to the built-in small configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Item-weighted average accuracy of a scores file.
    Aggregate {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Print a complete configuration file with every key spelled out.
    PrintConfig {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
    },
    /// Write synthetic examples or probes as JSON lines.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DataKind::Examples)]
        kind: DataKind,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Gradcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Examples,
    Probes,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (no, line) in BufReader::new(File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?)
    .lines()
    .enumerate()
    {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), no + 1)))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        writeln!(
            w,
            "{}",
            serde_json::to_string(item).expect("records serialize")
        )?;
    }
    w.flush()?;
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Runs a command, writing its report to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            max_steps,
        } => train(
            config.as_deref(),
            &out,
            resume.as_deref(),
            max_steps,
            stdout,
        ),
        Command::Eval {
            ckpt,
            probes,
            count,
            seed,
        } => {
            let trainer = load_trainer(&ckpt)?;
            let probes: Vec<Probe> = match probes {
                Some(p) => read_jsonl(&p)?,
                None => trainer.corpus.probes(count, mix64(seed ^ 0x9B)),
            };
            let report = toy_mc_eval(&trainer.model, &probes)?;
            writeln!(
                stdout,
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            )?;
            Ok(())
        }
        Command::Diagnose {
            ckpt,
            data,
            count,
            seed,
        } => {
            let trainer = load_trainer(&ckpt)?;
            let examples: Vec<Example> = match data {
                Some(p) => read_jsonl(&p)?,
                None => trainer.corpus.sample_examples(count, mix64(seed ^ 0xD1)),
            };
            diagnose(&trainer, &examples, stdout)
        }
        Command::Gradcheck { config, tolerance } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::gradcheck(),
            };
            let report = joint_objective_gradcheck(&cfg)?;
            writeln!(
                stdout,
                "max_relative_error {:e} over {} coordinates (tolerance {tolerance:e})",
                report.max_relative_error, report.coordinates
            )?;
            if report.max_relative_error < tolerance {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "gradient check failed: relative error {:e} >= {tolerance:e}",
                    report.max_relative_error
                )))
            }
        }
        Command::Aggregate { scores } => {
            let scores = parse_scores(&crate::error::read_to_string(&scores)?)?;
            let avg = weighted_average(&scores)?;
            let items: u64 = scores.iter().map(|s| s.count).sum();
            writeln!(
                stdout,
                "weighted_average {avg:.2} ({} benchmarks, {items} items)",
                scores.len()
            )?;
            Ok(())
        }
        Command::PrintConfig { preset } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Gradcheck => RunConfig::gradcheck(),
            };
            write!(stdout, "{}", cfg.to_toml())?;
            Ok(())
        }
        Command::GenData {
            config,
            out,
            kind,
            count,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let trainer = Trainer::from_run_config(&cfg)?;
            match kind {
                DataKind::Examples => {
                    write_jsonl(&out, &trainer.corpus.sample_examples(count, seed))?
                }
                DataKind::Probes => write_jsonl(&out, &trainer.corpus.probes(count, seed))?,
            }
            writeln!(stdout, "wrote {count} {kind:?} to {}", out.display())?;
            Ok(())
        }
    }
}

fn train(
    config: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    max_steps: Option<usize>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let mut trainer = match resume {
        Some(ckpt) => {
            let trainer = load_trainer(ckpt)?;
            if let Some(path) = config {
                let given = RunConfig::load(path)?;
                if given.hash() != trainer.run_config().hash() {
                    return Err(Error::Config(format!(
                        "{} does not match the configuration stored in {}",
                        path.display(),
                        ckpt.display()
                    )));
                }
            }
            trainer
        }
        None => Trainer::from_run_config(&load_config(config)?)?,
    };
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join(METRICS_FILE);
    let file = if resume.is_some() {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut metrics = BufWriter::new(file);
    let every = trainer.config.checkpoint_every;
    let mut ran = 0;
    let mut last = None;
    while !trainer.finished() && max_steps.is_none_or(|m| ran < m) {
        match trainer.train_step() {
            Ok(rec) => {
                writeln!(
                    metrics,
                    "{}",
                    serde_json::to_string(&rec).expect("metrics serialize")
                )?;
                last = Some(rec);
                ran += 1;
                if every > 0 && trainer.step % every == 0 {
                    metrics.flush()?;
                    save_trainer(&trainer, &out.join(CHECKPOINT_FILE))?;
                }
            }
            Err(e) => {
                metrics.flush()?;
                save_trainer(&trainer, &out.join(LAST_GOOD_FILE))?;
                return Err(e);
            }
        }
    }
    metrics.flush()?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_trainer(&trainer, &ckpt)?;
    let cfg = trainer.run_config();
    let manifest = json!({
        "tool": "lora-moe",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "config": cfg,
        "seed": cfg.train.seed,
        "step": trainer.step,
        "finished": trainer.finished(),
        "checkpoint": CHECKPOINT_FILE,
        "checkpoint_sha256": file_sha256(&ckpt)?,
        "metrics": METRICS_FILE,
        "metrics_sha256": file_sha256(&metrics_path)?,
        "last_record": last,
    });
    std::fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    writeln!(
        stdout,
        "trained to step {} of {}; outputs in {}",
        trainer.step,
        cfg.train.total_steps,
        out.display()
    )?;
    Ok(())
}

fn diagnose(trainer: &Trainer, examples: &[Example], stdout: &mut dyn Write) -> Result<()> {
    let profile = routing_profile(&trainer.model, examples, trainer.config.batch_size)?;
    let c = &profile.confidence;
    let line = |v: serde_json::Value| serde_json::to_string(&v).expect("records serialize");
    writeln!(
        stdout,
        "{}",
        line(json!({
            "record": "confidence",
            "global_conf": c.global_conf,
            "per_layer_conf": c.per_layer_conf,
            "token_count": c.token_count,
        }))
    )?;
    for (l, conf) in c.per_layer_conf.iter().enumerate() {
        writeln!(
            stdout,
            "{}",
            line(json!({
                "record": "layer",
                "layer": l,
                "conf": conf,
                "p_bar": profile.p_bar[l],
                "argmax_share": profile.argmax_share[l],
            }))
        )?;
    }
    writeln!(
        stdout,
        "{}",
        line(json!({"record": "specialization", "task_expert_nmi": profile.task_expert_nmi}))
    )?;
    Ok(())
}
