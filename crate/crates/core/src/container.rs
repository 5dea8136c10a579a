//! Shared layout of the binary artifact files: a magic line, one JSON header
//! line, then a little-endian f32 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn encode<H: Serialize>(magic: &[u8], header: &H, payload: &[f32]) -> Vec<u8> {
    let head = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(magic.len() + head.len() + 1 + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&head);
    out.push(b'\n');
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Split a container into its parsed header and the raw payload bytes.
pub(crate) fn decode<'a, H: DeserializeOwned>(magic: &[u8], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    let what = String::from_utf8_lossy(&magic[..magic.len() - 1]).into_owned();
    let rest = bytes
        .strip_prefix(magic)
        .ok_or_else(|| Error::format(format!("bad magic, expected {what}")))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(format!("{what}: missing header line")))?;
    let header = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::format(format!("{what}: bad header: {e}")))?;
    Ok((header, &rest[nl + 1..]))
}

pub(crate) fn read_f32s(payload: &[u8], count: usize, what: &str) -> Result<Vec<f32>> {
    if payload.len() != count * 4 {
        return Err(Error::format(format!(
            "{what}: payload has {} bytes, header promises {}",
            payload.len(),
            count * 4
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write via a temporary sibling so a failed write never leaves a partial file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let res = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
