//! The ".rten" tensor file: one UTF-8 JSON header line
//! `{"dtype":"f32","shape":[...],"order":"row-major","endian":"little"}`
//! terminated by '\n', followed by the raw little-endian f32 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_HEADER: usize = 64 * 1024;
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<u64>,
    order: String,
    endian: String,
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let header = Header {
        dtype: "f32".into(),
        shape: t.shape().iter().map(|&d| d as u64).collect(),
        order: "row-major".into(),
        endian: "little".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in t.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("rten: missing header newline".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Parse(format!("rten header: {}", e)))?;
    if header.dtype != "f32" {
        return Err(Error::Parse(format!("rten: unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(Error::Parse(format!("rten: unsupported order {:?}", header.order)));
    }
    if header.endian != "little" {
        return Err(Error::Parse(format!("rten: unsupported endian {:?}", header.endian)));
    }
    let mut numel: u64 = 1;
    for &d in &header.shape {
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Parse("rten: shape too large".into()))?;
    }
    let payload = &bytes[nl + 1..];
    let expected = numel as usize * 4;
    if payload.len() != expected {
        return Err(Error::Parse(format!(
            "rten: payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            expected
        )));
    }
    let mut data = Vec::with_capacity(numel as usize);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Parse("rten: non-finite value in payload".into()));
        }
        data.push(v);
    }
    let shape: Vec<usize> = header.shape.iter().map(|&d| d as usize).collect();
    Tensor::new(&shape, data)
}

pub fn write_file(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &to_bytes(t))
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
