//! Wire format: every message is a 4-byte big-endian length followed by
//! that many bytes of UTF-8 JSON. Messages carry a `type` tag.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSample {
    pub id: String,
    /// Flattened row-major input.
    pub input: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Infer {
        batch_id: String,
        samples: Vec<WireSample>,
    },
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Prediction {
        batch_id: String,
        sample_id: String,
        class: usize,
        confidence: f32,
        /// `cache-<ordinal>` or `final`.
        exit: String,
        path_flops: u64,
    },
    /// Sent after the last prediction of a batch.
    BatchDone { batch_id: String, count: usize },
    Error {
        batch_id: Option<String>,
        message: String,
    },
    Report { report: serde_json::Value },
}

#[derive(Debug)]
pub enum FrameError {
    TooLarge { length: usize, limit: usize },
    Io(io::Error),
}

impl std::fmt::Display for FrameError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameError::TooLarge { length, limit } => {
                write!(f, "frame of {length} bytes exceeds the {limit}-byte limit")
            }
            FrameError::Io(e) => e.fmt(f),
        }
    }
}

impl From<io::Error> for FrameError {
    fn from(e: io::Error) -> Self {
        FrameError::Io(e)
    }
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before a header.
pub fn read_frame(r: &mut impl Read, limit: usize) -> Result<Option<Vec<u8>>, FrameError> {
    let mut header = [0u8; 4];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let length = u32::from_be_bytes(header) as usize;
    if length > limit {
        return Err(FrameError::TooLarge { length, limit });
    }
    let mut buf = vec![0u8; length];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn send<T: Serialize>(w: &mut impl Write, message: &T) -> io::Result<()> {
    write_frame(w, &serde_json::to_vec(message).expect("message serializes"))
}

pub fn receive<T: for<'de> Deserialize<'de>>(r: &mut impl Read, limit: usize) -> io::Result<Option<T>> {
    match read_frame(r, limit) {
        Ok(Some(bytes)) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
        Ok(None) => Ok(None),
        Err(FrameError::Io(e)) => Err(e),
        Err(e) => Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
    }
}

/// Best-effort `batch_id` from a payload that failed to parse as a request.
pub fn salvage_batch_id(bytes: &[u8]) -> Option<String> {
    let v: serde_json::Value = serde_json::from_slice(bytes).ok()?;
    v.get("batch_id")?.as_str().map(str::to_string)
}
