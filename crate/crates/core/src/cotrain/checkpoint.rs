//! Trainer checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! bytes 0..4    magic "SGCK"
//! bytes 4..8    u32 format version
//! bytes 8..16   u64 header length H
//! bytes 16..16+H  UTF-8 JSON header (see `Header`)
//! remainder     f64 payload: for each parameter group in header order,
//!               its parameters followed by its momentum buffer
//! ```
//!
//! The header carries the full training configuration, the number of
//! completed iterations, the group table and the history so far as CSV
//! lines. Random streams are keyed by iteration, so nothing else is needed
//! to continue a run bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::history::{history_to_csv, parse_history};
use super::{TrainConfig, Trainer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: TrainConfig,
    pub iteration: u64,
    pub groups: Vec<GroupRecord>,
    pub history_csv: String,
}

/// Decoded header plus payload, before it is turned back into a trainer.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub payload: Vec<f64>,
}

pub fn encode_checkpoint(trainer: &Trainer) -> Result<Vec<u8>> {
    let b = trainer.bundle();
    let groups: Vec<GroupRecord> = (0..b.num_groups())
        .map(|g| GroupRecord {
            name: b.group_name(g),
            len: b.group(g).len(),
        })
        .collect();
    let header = Header {
        config: trainer.config().clone(),
        iteration: trainer.iteration(),
        groups,
        history_csv: history_to_csv(trainer.history()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for g in 0..b.num_groups() {
        for v in b.group(g).iter().chain(&trainer.momentum()[g]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let raw = &body[hlen..];
    let expected: usize = header.groups.iter().map(|g| 2 * g.len).sum();
    if raw.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header describes {}",
            raw.len(),
            expected * 8
        )));
    }
    let payload = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Checkpoint { header, payload })
}

impl Checkpoint {
    pub fn into_trainer(self) -> Result<Trainer> {
        let Checkpoint { header, payload } = self;
        let mut trainer = Trainer::new(header.config.clone())?;
        let b = trainer.bundle();
        if b.num_groups() != header.groups.len() {
            return Err(Error::Checkpoint(format!(
                "configuration builds {} parameter groups, checkpoint has {}",
                b.num_groups(),
                header.groups.len()
            )));
        }
        for (g, rec) in header.groups.iter().enumerate() {
            if rec.name != b.group_name(g) || rec.len != b.group(g).len() {
                return Err(Error::Checkpoint(format!(
                    "group {g} is {}[{}] in the checkpoint but {}[{}] in the model",
                    rec.name,
                    rec.len,
                    b.group_name(g),
                    b.group(g).len()
                )));
            }
        }
        let history = parse_history(&header.history_csv)?;
        if history.len() as u64 != header.iteration {
            return Err(Error::Checkpoint(format!(
                "history has {} rows for {} completed iterations",
                history.len(),
                header.iteration
            )));
        }
        let mut momentum = Vec::with_capacity(header.groups.len());
        let mut off = 0;
        for (g, rec) in header.groups.iter().enumerate() {
            trainer.bundle_mut().group_mut(g).copy_from_slice(&payload[off..off + rec.len]);
            off += rec.len;
            momentum.push(payload[off..off + rec.len].to_vec());
            off += rec.len;
        }
        let bundle = trainer.into_bundle();
        Ok(Trainer::from_parts(header.config, bundle, momentum, header.iteration, history))
    }
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(trainer)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)?.into_trainer()
}
