//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ATBRCKPT" | version u32 | hash_len u32 | config hash (ASCII hex)
//! payload_len u64 | sha256(payload) [32 bytes] | payload
//! ```
//!
//! The payload is a record count `u32` followed by records
//! `name_len u32 | name | dtype u8 | rank u32 | dims u64* | raw data`.
//! Tensors are stored little-endian in their native precision, so a round
//! trip is bit-exact.

use std::fs;
use std::path::Path;

use gradtape::{AdamState, Real, Tensor};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::trainer::{NoiseEntry, TrainState};

const MAGIC: &[u8; 8] = b"ATBRCKPT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;
const DTYPE_TEXT: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Record {
    name: String,
    shape: Vec<usize>,
    data: Payload,
}

fn tensor_record<T: Real>(name: String, t: &Tensor<T>) -> Record {
    let data = match T::DTYPE {
        "f32" => Payload::F32(t.data().iter().map(|v| v.to_f32().expect("f32")).collect()),
        _ => Payload::F64(t.data().iter().map(|v| v.to_f64().expect("f64")).collect()),
    };
    Record { name, shape: t.shape().to_vec(), data }
}

fn u64_record(name: &str, values: Vec<u64>) -> Record {
    Record { name: name.to_string(), shape: vec![values.len()], data: Payload::U64(values) }
}

fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        let tag = match r.data {
            Payload::F32(_) => DTYPE_F32,
            Payload::F64(_) => DTYPE_F64,
            Payload::U64(_) => DTYPE_U64,
            Payload::Text(_) => DTYPE_TEXT,
        };
        out.push(tag);
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &r.data {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Text(s) => out.extend_from_slice(s.as_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("size overflow".into()))
    }
}

fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Integrity("bad record name".into()))?;
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.size()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match tag {
            DTYPE_F32 => Payload::F32(
                r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
            ),
            DTYPE_F64 => Payload::F64(
                r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            ),
            DTYPE_U64 => Payload::U64(
                r.take(n * 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect(),
            ),
            DTYPE_TEXT => Payload::Text(
                String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Integrity("bad text record".into()))?,
            ),
            other => return Err(Error::Integrity(format!("unknown dtype tag {other}"))),
        };
        out.push(Record { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity("trailing bytes after records".into()));
    }
    Ok(out)
}

fn state_records<T: Real>(state: &TrainState<T>) -> Vec<Record> {
    let config_text = state.config.to_text();
    let mut recs = vec![
        Record { name: "config".into(), shape: vec![config_text.len()], data: Payload::Text(config_text) },
        u64_record("step", vec![state.step]),
    ];
    let seed = state.rng.get_seed();
    let mut rng_words: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect();
    rng_words.push(state.rng.get_stream());
    let pos = state.rng.get_word_pos();
    rng_words.push(pos as u64);
    rng_words.push((pos >> 64) as u64);
    recs.push(u64_record("rng", rng_words));
    let ps = &state.net.params;
    for i in 0..ps.len() {
        let name = ps.name(i);
        recs.push(tensor_record(format!("param/{name}"), ps.value(i)));
        let a = &state.adam[i];
        recs.push(tensor_record(format!("adam_m/{name}"), &a.m));
        recs.push(tensor_record(format!("adam_v/{name}"), &a.v));
        recs.push(u64_record(&format!("adam_t/{name}"), vec![a.t]));
    }
    for (id, e) in state.bank.entries() {
        recs.push(tensor_record(format!("noise/{id}"), &e.r));
        recs.push(tensor_record(format!("noise_m/{id}"), &e.adam.m));
        recs.push(tensor_record(format!("noise_v/{id}"), &e.adam.v));
        recs.push(u64_record(&format!("noise_t/{id}"), vec![e.adam.t]));
    }
    recs
}

/// Serializes the full training state.
pub fn encode_checkpoint<T: Real>(state: &TrainState<T>) -> Vec<u8> {
    let payload = encode_records(&state_records(state));
    let hash = state.config.hash();
    let mut out = Vec::with_capacity(payload.len() + 128);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    out.extend_from_slice(hash.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Parsed {
    hash: String,
    records: Vec<Record>,
}

fn parse_container(bytes: &[u8]) -> Result<Parsed> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::Format("not a checkpoint file".into()))? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hash_len = r.u32()? as usize;
    let hash = String::from_utf8(r.take(hash_len)?.to_vec()).map_err(|_| Error::Integrity("bad hash".into()))?;
    let len = r.size()?;
    let digest = r.take(32)?.to_vec();
    let payload = r.take(len)?;
    if r.pos != bytes.len() {
        return Err(Error::Integrity("trailing bytes after payload".into()));
    }
    if Sha256::digest(payload).as_slice() != digest.as_slice() {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    Ok(Parsed { hash, records: decode_records(payload)? })
}

/// The configuration stored in a checkpoint, without restoring state.
pub fn read_checkpoint_config(path: &Path) -> Result<ExperimentConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    config_from(&parse_container(&bytes)?)
}

fn config_from(parsed: &Parsed) -> Result<ExperimentConfig> {
    let rec = parsed.records.iter().find(|r| r.name == "config");
    let Some(Record { data: Payload::Text(text), .. }) = rec else {
        return Err(Error::Integrity("checkpoint has no config record".into()));
    };
    let config = ExperimentConfig::parse(text)?;
    if config.hash() != parsed.hash {
        return Err(Error::Integrity("stored config does not match header hash".into()));
    }
    Ok(config)
}

fn to_tensor<T: Real>(r: &Record) -> Result<Tensor<T>> {
    let values: Vec<T> = match (&r.data, T::DTYPE) {
        (Payload::F32(v), "f32") => v.iter().map(|&x| T::from_f32(x).expect("f32")).collect(),
        (Payload::F64(v), "f64") => v.iter().map(|&x| T::from_f64(x).expect("f64")).collect(),
        _ => return Err(Error::Format(format!("record {} has the wrong precision for this run", r.name))),
    };
    Ok(Tensor::from_vec(&r.shape, values))
}

fn to_u64s(r: &Record) -> Result<&[u64]> {
    match &r.data {
        Payload::U64(v) => Ok(v),
        _ => Err(Error::Integrity(format!("record {} is not integral", r.name))),
    }
}

/// Restores a training state. With `expected`, the stored config hash must
/// match it.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], expected: Option<&ExperimentConfig>) -> Result<TrainState<T>> {
    let parsed = parse_container(bytes)?;
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != parsed.hash {
            return Err(Error::ConfigMismatch { expected: want, found: parsed.hash });
        }
    }
    let config = config_from(&parsed)?;
    let mut state = TrainState::<T>::new(&config)?;
    let find = |name: &str| {
        parsed.records.iter().find(|r| r.name == name).ok_or_else(|| Error::Integrity(format!("missing record {name}")))
    };
    state.step = to_u64s(find("step")?)?.first().copied().ok_or_else(|| Error::Integrity("empty step".into()))?;
    let words = to_u64s(find("rng")?)?;
    if words.len() != 7 {
        return Err(Error::Integrity("bad rng record".into()));
    }
    let mut seed = [0u8; 32];
    for (i, w) in words[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos(u128::from(words[5]) | (u128::from(words[6]) << 64));
    state.rng = rng;

    for i in 0..state.net.params.len() {
        let name = state.net.params.name(i).to_string();
        let value = to_tensor::<T>(find(&format!("param/{name}"))?)?;
        if value.shape() != state.net.params.value(i).shape() {
            return Err(Error::Integrity(format!("parameter {name} has shape {:?}", value.shape())));
        }
        state.net.params.set_value(i, value);
        let m = to_tensor::<T>(find(&format!("adam_m/{name}"))?)?;
        let v = to_tensor::<T>(find(&format!("adam_v/{name}"))?)?;
        let t = to_u64s(find(&format!("adam_t/{name}"))?)?[0];
        state.adam[i] = AdamState { m, v, t };
    }
    for r in &parsed.records {
        let Some(id) = r.name.strip_prefix("noise/") else { continue };
        let id: u64 = id.parse().map_err(|_| Error::Integrity(format!("bad noise id in {}", r.name)))?;
        let entry = NoiseEntry {
            r: to_tensor(r)?,
            adam: AdamState {
                m: to_tensor(find(&format!("noise_m/{id}"))?)?,
                v: to_tensor(find(&format!("noise_v/{id}"))?)?,
                t: to_u64s(find(&format!("noise_t/{id}"))?)?[0],
            },
        };
        state.bank.insert(id, entry)?;
    }
    Ok(state)
}

pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<&ExperimentConfig>) -> Result<TrainState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
