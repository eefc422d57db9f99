//! Binary checkpoint layout:
//!
//! ```text
//! "SDSC" | u32 version | u64 header length | JSON header | f32 LE payload | u64 checksum
//! ```
//!
//! The header lists every tensor with its byte offset into the payload. The
//! checksum is the first eight bytes (little-endian) of the SHA-256 digest of
//! the header and payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matching::CurriculumState;
use crate::train::{Checkpoint, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SDSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    updates: u64,
    gamma: f64,
    rng: RngState,
    tensors: Vec<Entry>,
}

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// `(name, shape, values)` of everything in the payload, in file order.
fn tensors(ck: &Checkpoint) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = Vec::new();
    for p in &ck.model.params {
        let shape = p.tensor.shape().to_vec();
        out.push((p.name.clone(), shape.clone(), p.tensor.data()));
        out.push((format!("{}#m", p.name), shape.clone(), &p.first_moment[..]));
        out.push((format!("{}#v", p.name), shape, &p.second_moment[..]));
    }
    for (i, s) in ck.model.stats.iter().enumerate() {
        out.push((format!("bn{i}#mean"), vec![s.mean.len()], &s.mean[..]));
        out.push((format!("bn{i}#var"), vec![s.var.len()], &s.var[..]));
    }
    out
}

fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut offset = 0u64;
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, data) in tensors(ck) {
        entries.push(Entry { name, shape, offset });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += 4 * data.len() as u64;
    }
    let header = Header {
        config: ck.config.clone(),
        step: ck.step,
        updates: ck.updates,
        gamma: ck.curriculum.gamma,
        rng: RngState {
            seed: hex(&ck.rng.get_seed()),
            stream: ck.rng.get_stream(),
            word_pos: ck.rng.get_word_pos().to_string(),
        },
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    let body_start = out.len();
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let sum = checksum(&out[body_start..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck);
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| Error::Truncated(format!("{what}: file ends at byte {}", bytes.len())))
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(&CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().expect("4"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8, "header length")?.try_into().expect("8")) as usize;
    let header_bytes = take(bytes, 16, header_len, "header")?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let mut ck = Checkpoint::new(header.config.clone())?;
    let specs: Vec<(String, Vec<usize>, usize)> = tensors(&ck).into_iter().map(|(n, s, d)| (n, s, d.len())).collect();
    if specs.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, the configured network has {}",
            header.tensors.len(),
            specs.len()
        )));
    }
    let payload_len: usize = specs.iter().map(|s| 4 * s.2).sum();
    let payload_start = 16 + header_len;
    let payload = take(bytes, payload_start, payload_len, "payload")?;
    let stored = u64::from_le_bytes(
        take(bytes, payload_start + payload_len, 8, "checksum")?
            .try_into()
            .expect("8"),
    );
    if bytes.len() != payload_start + payload_len + 8 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the checksum",
            bytes.len() - payload_start - payload_len - 8
        )));
    }
    let computed = checksum(&bytes[16..payload_start + payload_len]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut values = Vec::with_capacity(specs.len());
    let mut offset = 0usize;
    for ((name, shape, n), entry) in specs.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape || entry.offset as usize != offset {
            return Err(Error::Format(format!(
                "tensor {} {:?} at {} does not match the expected {name} {shape:?} at {offset}",
                entry.name, entry.shape, entry.offset
            )));
        }
        let raw = &payload[offset..offset + 4 * n];
        values.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                .collect::<Vec<f32>>(),
        );
        offset += 4 * n;
    }
    let mut values = values.into_iter();
    for p in &mut ck.model.params {
        p.tensor
            .data_mut()
            .copy_from_slice(&values.next().expect("count checked"));
        p.first_moment = values.next().expect("count checked");
        p.second_moment = values.next().expect("count checked");
    }
    for s in &mut ck.model.stats {
        s.mean = values.next().expect("count checked");
        s.var = values.next().expect("count checked");
    }
    let seed: [u8; 32] = unhex(&header.rng.seed)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::Format("checkpoint rng seed".into()))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Format("checkpoint rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    ck.rng = rng;
    ck.step = header.step;
    ck.updates = header.updates;
    ck.curriculum = CurriculumState {
        gamma: header.gamma,
        decay: header.config.gamma_decay,
    };
    Ok(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// SHA-256 of a checkpoint file, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
