use lora_moe::checkpoint::{decode, encode, Payload, Record};
use lora_moe::diagnostics::parse_scores;
use lora_moe::error::Error;
use lora_moe::tensor::Tensor;
use lora_moe::training::MetricsRecord;
use std::path::{Path, PathBuf};

fn testdata(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
}

fn sample_records() -> Vec<Record> {
    vec![
        Record::new(
            "weights",
            Payload::Tensor(Tensor::new(&[2, 3], vec![0.5, -1.25, 2.0, 0.0, 1e-3, -0.0]).unwrap()),
        ),
        Record::new("counters", Payload::U64(vec![3, 7])),
        Record::new("note", Payload::Text("hello".into())),
    ]
}

#[test]
fn checkpoint_golden_bytes() {
    let golden = std::fs::read(testdata("format_sample.ckpt")).unwrap();
    assert_eq!(encode(&sample_records()), golden);
    assert_eq!(decode(&golden).unwrap(), sample_records());
}

#[test]
fn checkpoint_golden_rejects_every_single_byte_flip() {
    let golden = std::fs::read(testdata("format_sample.ckpt")).unwrap();
    for i in 0..golden.len() {
        let mut bytes = golden.clone();
        bytes[i] ^= 0x01;
        match decode(&bytes) {
            Err(Error::Integrity { .. } | Error::Version { .. }) => {}
            other => panic!("flip at byte {i} gave {other:?}"),
        }
    }
}

#[test]
fn metrics_sample_parses() {
    let text = std::fs::read_to_string(testdata("metrics_sample.jsonl")).unwrap();
    let records: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 5);
    assert!(records.iter().enumerate().all(|(i, r)| r.step == i));
    assert!(records[4].eval_lm.is_some() && records[3].eval_lm.is_none());
    for r in &records {
        assert_eq!(serde_json::to_string(r).unwrap(), text.lines().nth(r.step).unwrap());
    }
}

#[test]
fn scores_golden_files_parse() {
    for file in ["scores_row_a.txt", "scores_row_b.txt"] {
        let scores = parse_scores(&std::fs::read_to_string(testdata(file)).unwrap()).unwrap();
        let names: Vec<&str> = scores.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["CMB", "CMExam", "CMMLU"]);
        assert_eq!(scores.iter().map(|s| s.count).sum::<u64>(), 19365);
    }
}
