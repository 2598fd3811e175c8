//! `LGAE` dataset files.
//!
//! ```text
//! "LGAE" | u32 version = 1 | u32 count | u32 C | u32 N₀ | u32 K | u32 sample_rate_hz
//! per record: u64 patient_id | K label bytes | C·N₀ f32
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Dataset, EcgRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LGAE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    ds.check()?;
    let per_record = 8 + ds.classes + 4 * ds.leads * ds.len;
    let mut out = Vec::with_capacity(HEADER_LEN + per_record * ds.len());
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        ds.records.len() as u32,
        ds.leads as u32,
        ds.len as u32,
        ds.classes as u32,
        ds.sample_rate_hz,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in &ds.records {
        out.extend_from_slice(&r.patient_id.to_le_bytes());
        out.extend_from_slice(&r.labels);
        for &x in r.signal.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn fail<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    })
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return fail(0, "bad magic, expected \"LGAE\"");
    }
    if bytes.len() < HEADER_LEN {
        return fail(bytes.len(), "truncated header");
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return fail(4, format!("unsupported version {}", word(0)));
    }
    let (count, leads, len, classes, rate) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize, word(5));
    let per_record = 8 + classes + 4 * leads * len;
    let mut ds = Dataset::new(leads, len, classes, rate);
    ds.records.reserve(count);
    let mut pos = HEADER_LEN;
    for i in 0..count {
        if bytes.len() - pos < per_record {
            return fail(bytes.len(), format!("truncated in record {i} of {count}"));
        }
        let patient_id = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        let labels = bytes[pos..pos + classes].to_vec();
        if let Some(j) = labels.iter().position(|&b| b > 1) {
            return fail(pos + j, format!("label byte {} is not 0 or 1", labels[j]));
        }
        pos += classes;
        let data: Vec<f32> = bytes[pos..pos + 4 * leads * len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(j) = data.iter().position(|x| !x.is_finite()) {
            return fail(pos + 4 * j, "non-finite sample");
        }
        pos += 4 * leads * len;
        ds.records.push(EcgRecord {
            signal: Tensor::new(vec![leads, len], data)?,
            labels,
            patient_id,
        });
    }
    if pos != bytes.len() {
        return fail(pos, "trailing bytes after last record");
    }
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode(&fs::read(path)?)
}
