use lora_moe::checkpoint::load_trainer;
use lora_moe::config::RunConfig;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lora-moe");

fn testdata(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
}

fn exec(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = exec(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Fails with a nonzero status and a single-line diagnostic; returns it.
fn fails(args: &[&str]) -> String {
    let out = exec(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn aggregate_golden_rows() {
    let a = ok(&["aggregate", "--scores", s(&testdata("scores_row_a.txt"))]);
    assert!(a.starts_with("weighted_average 64.49 "), "{a}");
    let b = ok(&["aggregate", "--scores", s(&testdata("scores_row_b.txt"))]);
    assert!(b.starts_with("weighted_average 29.91 "), "{b}");
}

#[test]
fn aggregate_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "CMB 10 55\nCMMLU ten 40\n").unwrap();
    assert!(fails(&["aggregate", "--scores", s(&bad)]).contains("line 2"));
    std::fs::write(&bad, "CMB 0 55\n").unwrap();
    fails(&["aggregate", "--scores", s(&bad)]);
    std::fs::write(&bad, "CMB 3 155\n").unwrap();
    fails(&["aggregate", "--scores", s(&bad)]);
}

#[test]
fn default_config_matches_golden() {
    let printed = ok(&["print-config"]);
    let golden = std::fs::read_to_string(testdata("toy.toml")).unwrap();
    assert_eq!(RunConfig::from_toml_str(&printed).unwrap(), RunConfig::from_toml_str(&golden).unwrap());
    assert_eq!(RunConfig::from_toml_str(&golden).unwrap(), RunConfig::default());
    let gc = ok(&["print-config", "--preset", "gradcheck"]);
    assert_eq!(RunConfig::from_toml_str(&gc).unwrap(), RunConfig::gradcheck());
}

#[test]
fn train_writes_outputs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = testdata("tiny.toml");
    let a = dir.path().join("a");
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    let metrics = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "lm", "balance", "contrastive", "total", "lr", "conf_mean", "p_bar"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let loaded = RunConfig::load(&cfg).unwrap();
    assert_eq!(manifest["config_hash"], loaded.hash());
    assert_eq!(manifest["step"], 12);
    let trainer = load_trainer(&a.join("checkpoint.bin")).unwrap();
    assert_eq!(trainer.step, 12);
    assert_eq!(trainer.run_config(), loaded);

    let b = dir.path().join("b");
    ok(&["train", "--config", s(&cfg), "--out", s(&b), "--max-steps", "7"]);
    ok(&["train", "--out", s(&b), "--resume", s(&b.join("checkpoint.bin"))]);
    assert_eq!(std::fs::read(a.join("metrics.jsonl")).unwrap(), std::fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.bin")).unwrap(), std::fs::read(b.join("checkpoint.bin")).unwrap());

    // resuming with a different config is refused
    let other = dir.path().join("other.toml");
    std::fs::write(&other, std::fs::read_to_string(&cfg).unwrap().replace("total_steps = 12", "total_steps = 13")).unwrap();
    let err = fails(&["train", "--config", s(&other), "--out", s(&b), "--resume", s(&b.join("checkpoint.bin"))]);
    assert!(err.contains("does not match"), "{err}");
}

#[test]
fn eval_diagnose_and_data_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = testdata("tiny.toml");
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let ckpt = out.join("checkpoint.bin");

    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--ckpt", s(&ckpt), "--count", "40"])).unwrap();
    assert_eq!(report["evaluated"], 40);

    let probes = dir.path().join("probes.jsonl");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&probes), "--kind", "probes", "--count", "10"]);
    assert_eq!(std::fs::read_to_string(&probes).unwrap().lines().count(), 10);
    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--ckpt", s(&ckpt), "--probes", s(&probes)])).unwrap();
    assert_eq!(report["evaluated"], 10);

    let data = dir.path().join("examples.jsonl");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "6"]);
    let diag = ok(&["diagnose", "--ckpt", s(&ckpt), "--data", s(&data)]);
    let records: Vec<serde_json::Value> = diag.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 1 + 2 + 1);
    assert_eq!(records[0]["record"], "confidence");
    assert_eq!(records[0]["token_count"], 6 * 7 * 2);
    assert_eq!(records[1]["record"], "layer");
    assert_eq!(records[1]["p_bar"].as_array().unwrap().len(), 4);
    assert_eq!(records[3]["record"], "specialization");
}

#[test]
fn corrupt_or_foreign_checkpoints_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&testdata("tiny.toml")), "--out", s(&out)]);
    let mut bytes = std::fs::read(out.join("checkpoint.bin")).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 0x10;
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, &bytes).unwrap();
    let err = fails(&["eval", "--ckpt", s(&bad)]);
    assert!(err.contains("checksum mismatch") && err.contains("record `"), "{err}");

    let err = fails(&["diagnose", "--ckpt", s(&testdata("toy.toml"))]);
    assert!(err.contains("bad magic"), "{err}");
    let err = fails(&["eval", "--ckpt", s(&dir.path().join("missing.bin"))]);
    assert!(err.contains("missing.bin"), "{err}");
}

#[test]
fn invalid_configs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let err = fails(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(err.contains("learning_rate"), "{err}");
    std::fs::write(&cfg, "[moe]\nnum_experts = 2\ntop_k = 3\n").unwrap();
    let err = fails(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(err.contains("invalid configuration"), "{err}");
}

#[test]
fn gradcheck_command() {
    let out = ok(&["gradcheck"]);
    assert!(out.starts_with("max_relative_error "), "{out}");
}
