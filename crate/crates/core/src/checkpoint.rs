//! Checkpoint format: magic `PGE1`, then one record per parameter in
//! registration order — u32 LE name length, name bytes (utf-8), u32 LE rank,
//! rank × u64 LE dims, then product(dims) × f64 LE payload. Loading demands
//! an exact name/shape match against the configured architecture and reports
//! every mismatch at once.

use crate::error::{PgeError, Result};
use crate::params::{ParamId, ParamStore};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PGE1";

/// Serialize every parameter (frozen encoder included) in registration
/// order.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut bytes = MAGIC.to_vec();
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name);
        let value = store.value(id);
        bytes.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn parse_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let fail = |pos: usize, msg: String| {
        Err(PgeError::Checkpoint(format!("at byte {pos}: {msg}")))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return fail(0, "missing PGE1 magic".into());
    }
    let mut pos = 4;
    let mut records = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *pos + n {
            return Err(PgeError::Checkpoint(format!(
                "at byte {}: truncated (need {n} more bytes)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| PgeError::Checkpoint(format!("at byte {pos}: name not utf-8")))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return fail(pos, format!("implausible rank {rank} for {name}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let payload = take(&mut pos, count * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

/// Load a checkpoint into an already-constructed store. The record set must
/// match the store's names and shapes exactly; on any disagreement nothing
/// is written and the error lists every mismatch.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let records = parse_records(&bytes)?;
    let mut mismatches = Vec::new();

    let by_name: std::collections::HashMap<&str, &Record> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    if by_name.len() != records.len() {
        return Err(PgeError::Checkpoint(
            "duplicate parameter names in checkpoint".into(),
        ));
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for &id in &ids {
        match by_name.get(store.name(id)) {
            None => mismatches.push(format!("missing from file: {}", store.name(id))),
            Some(rec) if rec.shape != store.value(id).shape() => mismatches.push(format!(
                "{}: file shape {:?} vs configured {:?}",
                store.name(id),
                rec.shape,
                store.value(id).shape()
            )),
            Some(_) => {}
        }
    }
    for rec in &records {
        if !ids.iter().any(|&id| store.name(id) == rec.name) {
            mismatches.push(format!("unknown parameter in file: {}", rec.name));
        }
    }
    if !mismatches.is_empty() {
        return Err(PgeError::Checkpoint(format!(
            "{} mismatch(es): {}",
            mismatches.len(),
            mismatches.join("; ")
        )));
    }
    for &id in &ids {
        let rec = by_name[store.name(id)];
        store.value_mut(id).data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}
