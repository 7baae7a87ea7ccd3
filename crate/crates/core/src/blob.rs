//! Binary container shared by sample-set and medial-dataset files:
//!
//! ```text
//! magic: 8 bytes | header length: u64 LE | header: JSON | payload: f32 LE ...
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[f32]) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| Error::parse("header", e))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len() * 4);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a container; `payload_len` maps the parsed header to the number of
/// floats that must follow it.
pub fn read<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 8],
    payload_len: impl FnOnce(&H) -> usize,
) -> Result<(H, Vec<f32>)> {
    let what = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::parse(what, "bad magic or truncated header"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(Error::parse(what, "truncated header"));
    }
    let header: H =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::parse(&what, e))?;
    let payload = &body[header_len..];
    let expected = payload_len(&header);
    if payload.len() != expected * 4 {
        return Err(Error::parse(
            what,
            format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                expected * 4
            ),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}
