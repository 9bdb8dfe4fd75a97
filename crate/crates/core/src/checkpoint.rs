//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"LMOECKPT"
//! u32    format version
//! u32    record count
//! record*:
//!   u32 name length, name bytes (UTF-8)
//!   u8  kind (0 = f64 tensor, 1 = u64 array, 2 = UTF-8 text)
//!   u32 rank, u64 × rank dims (tensors only; 0 otherwise)
//!   u64 payload length, payload bytes
//!   u32 CRC-32 of everything in the record before it
//! ```
//!
//! A trainer checkpoint stores the run configuration, every trainable
//! tensor, the optimizer moments, the expert queues and the step counter.
//! Frozen weights are regenerated from the configuration seed and checked
//! against a stored digest.

use crate::config::RunConfig;
use crate::contrastive::ExpertMemoryQueue;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Trainer;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"LMOECKPT";
pub const FORMAT_VERSION: u32 = 1;

const KIND_F64: u8 = 0;
const KIND_U64: u8 = 1;
const KIND_TEXT: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tensor(Tensor),
    U64(Vec<u64>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

impl Record {
    pub fn new(name: impl Into<String>, payload: Payload) -> Self {
        Self {
            name: name.into(),
            payload,
        }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let start = out.len();
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        let (kind, dims, payload): (u8, &[usize], Vec<u8>) = match &r.payload {
            Payload::Tensor(t) => (
                KIND_F64,
                t.shape(),
                t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            Payload::U64(v) => (
                KIND_U64,
                &[],
                v.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            Payload::Text(s) => (KIND_TEXT, &[], s.as_bytes().to_vec()),
        };
        out.push(kind);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| integrity(record, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, record: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, record)?.try_into().unwrap(),
        ))
    }

    fn u64(&mut self, record: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, record)?.try_into().unwrap(),
        ))
    }

    fn len(&mut self, record: &str) -> Result<usize> {
        usize::try_from(self.u64(record)?).map_err(|_| integrity(record, "length overflow"))
    }
}

fn integrity(record: &str, reason: impl Into<String>) -> Error {
    Error::Integrity {
        record: record.to_string(),
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "header")? != MAGIC {
        return Err(integrity("header", "not a checkpoint file (bad magic)"));
    }
    let version = r.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("header")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = r.pos;
        let placeholder = format!("#{i}");
        let name_len = r.u32(&placeholder)? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, &placeholder)?).into_owned();
        let kind = r.take(1, &name)?[0];
        let rank = r.u32(&name)? as usize;
        if rank > 8 {
            return Err(integrity(&name, format!("implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.len(&name))
            .collect::<Result<Vec<_>>>()?;
        let payload_len = r.len(&name)?;
        let payload = r.take(payload_len, &name)?;
        let end = r.pos;
        let crc = r.u32(&name)?;
        if crc32fast::hash(&bytes[start..end]) != crc {
            return Err(integrity(&name, "checksum mismatch"));
        }
        let payload = match kind {
            KIND_F64 => {
                let numel: usize = dims.iter().product();
                if payload_len != numel * 8 {
                    return Err(integrity(
                        &name,
                        format!("payload of {payload_len} bytes for shape {dims:?}"),
                    ));
                }
                let data = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Payload::Tensor(
                    Tensor::new(&dims, data).map_err(|e| integrity(&name, e.to_string()))?,
                )
            }
            KIND_U64 if payload_len % 8 == 0 => Payload::U64(
                payload
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            KIND_TEXT => Payload::Text(
                String::from_utf8(payload.to_vec())
                    .map_err(|_| integrity(&name, "invalid UTF-8"))?,
            ),
            _ => {
                return Err(integrity(
                    &name,
                    format!("bad kind {kind} or payload length {payload_len}"),
                ))
            }
        };
        records.push(Record { name, payload });
    }
    if r.pos != bytes.len() {
        return Err(integrity(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(records)
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 over all non-trainable weights, in store order.
pub fn frozen_digest(trainer: &Trainer) -> String {
    let mut h = Sha256::new();
    for (_, p) in trainer.model.store.iter().filter(|(_, p)| !p.trainable()) {
        h.update(p.name.as_bytes());
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn trainer_records(trainer: &Trainer) -> Vec<Record> {
    let mut out = vec![
        Record::new("config", Payload::Text(trainer.run_config().to_toml())),
        Record::new("frozen_digest", Payload::Text(frozen_digest(trainer))),
        Record::new("trainer/step", Payload::U64(vec![trainer.step as u64])),
        Record::new("adam/step", Payload::U64(vec![trainer.optimizer.step])),
    ];
    for (id, p) in trainer.model.store.iter().filter(|(_, p)| p.trainable()) {
        let i = id.index();
        let shape = p.tensor.shape();
        let moment = |v: &Vec<f64>| {
            Payload::Tensor(Tensor::new(shape, v.clone()).expect("moment matches its parameter"))
        };
        out.push(Record::new(
            format!("param/{}", p.name),
            Payload::Tensor(p.tensor.detached()),
        ));
        out.push(Record::new(
            format!("adam/m/{}", p.name),
            moment(&trainer.optimizer.m[i]),
        ));
        out.push(Record::new(
            format!("adam/v/{}", p.name),
            moment(&trainer.optimizer.v[i]),
        ));
    }
    for (l, bank) in trainer.queues.iter().enumerate() {
        for (e, q) in bank.queues.iter().enumerate() {
            out.push(Record::new(
                format!("queue/{l}/{e}"),
                Payload::Tensor(q.buffer.clone()),
            ));
            out.push(Record::new(
                format!("queue/{l}/{e}/state"),
                Payload::U64(vec![q.write_ptr as u64, q.filled as u64]),
            ));
        }
    }
    out
}

struct Index(HashMap<String, Payload>);

impl Index {
    fn take(&mut self, name: &str) -> Result<Payload> {
        self.0
            .remove(name)
            .ok_or_else(|| integrity(name, "missing"))
    }

    fn text(&mut self, name: &str) -> Result<String> {
        match self.take(name)? {
            Payload::Text(s) => Ok(s),
            _ => Err(integrity(name, "expected text")),
        }
    }

    fn u64s(&mut self, name: &str, len: usize) -> Result<Vec<u64>> {
        match self.take(name)? {
            Payload::U64(v) if v.len() == len => Ok(v),
            _ => Err(integrity(name, format!("expected {len} integers"))),
        }
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        match self.take(name)? {
            Payload::Tensor(t) if t.shape() == shape => Ok(t),
            Payload::Tensor(t) => Err(integrity(
                name,
                format!("shape {:?}, expected {shape:?}", t.shape()),
            )),
            _ => Err(integrity(name, "expected a tensor")),
        }
    }
}

pub fn trainer_from_records(records: Vec<Record>) -> Result<Trainer> {
    let mut idx = Index(HashMap::new());
    for r in records {
        if idx.0.contains_key(&r.name) {
            return Err(integrity(&r.name, "duplicate record"));
        }
        idx.0.insert(r.name, r.payload);
    }
    let cfg = RunConfig::from_toml_str(&idx.text("config")?)
        .map_err(|e| integrity("config", e.to_string()))?;
    let mut trainer = Trainer::from_run_config(&cfg)?;
    if idx.text("frozen_digest")? != frozen_digest(&trainer) {
        return Err(integrity(
            "frozen_digest",
            "regenerated frozen weights differ from the saved run",
        ));
    }
    trainer.step = idx.u64s("trainer/step", 1)?[0] as usize;
    trainer.optimizer.step = idx.u64s("adam/step", 1)?[0];
    let ids = trainer.model.store.trainable_ids();
    for id in ids {
        let name = trainer.model.store.name(id).to_string();
        let shape = trainer.model.store.get(id).shape().to_vec();
        let value = idx.tensor(&format!("param/{name}"), &shape)?;
        let m = idx.tensor(&format!("adam/m/{name}"), &shape)?;
        let v = idx.tensor(&format!("adam/v/{name}"), &shape)?;
        trainer
            .model
            .store
            .get_mut(id)
            .data_mut()
            .copy_from_slice(value.data());
        trainer.optimizer.m[id.index()] = m.into_data();
        trainer.optimizer.v[id.index()] = v.into_data();
    }
    for (l, bank) in trainer.queues.iter_mut().enumerate() {
        for (e, q) in bank.queues.iter_mut().enumerate() {
            let shape = [q.capacity(), q.dim()];
            let buffer = idx.tensor(&format!("queue/{l}/{e}"), &shape)?;
            let state_name = format!("queue/{l}/{e}/state");
            let state = idx.u64s(&state_name, 2)?;
            let (ptr, filled) = (state[0] as usize, state[1] as usize);
            if ptr >= shape[0] || filled > shape[0] {
                return Err(integrity(
                    &state_name,
                    format!("pointer {ptr} / fill {filled} out of range"),
                ));
            }
            *q = ExpertMemoryQueue {
                buffer,
                write_ptr: ptr,
                filled,
            };
        }
    }
    if let Some(extra) = idx.0.keys().min() {
        return Err(integrity(extra, "unexpected record"));
    }
    Ok(trainer)
}

pub fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    write_atomic(path, &encode(&trainer_records(trainer)))
}

pub fn load_trainer(path: &Path) -> Result<Trainer> {
    trainer_from_records(decode(&crate::error::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Record> {
        vec![
            Record::new(
                "a",
                Payload::Tensor(
                    Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
                ),
            ),
            Record::new("b", Payload::U64(vec![7, u64::MAX])),
            Record::new("c", Payload::Text("hé".into())),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let recs = sample();
        let back = decode(&encode(&recs)).unwrap();
        assert_eq!(back, recs);
        if let Payload::Tensor(t) = &back[0].payload {
            assert!(t.data()[1].is_sign_negative());
        }
    }

    #[test]
    fn corruption_names_the_record() {
        let mut bytes = encode(&sample());
        let n = bytes.len();
        bytes[n - 6] ^= 0x40;
        match decode(&bytes) {
            Err(Error::Integrity { record, .. }) => assert_eq!(record, "c"),
            other => panic!("{other:?}"),
        }
        let bytes = encode(&sample());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 2]),
            Err(Error::Integrity { .. })
        ));
        assert!(matches!(decode(b"NOTACKPT"), Err(Error::Integrity { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::Version {
                found: 2,
                expected: 1
            })
        ));
    }
}
