//! `GLVOL1 H W T C\n` header followed by little-endian f32 samples,
//! channel fastest, then time, width, height.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

const MAGIC: &str = "GLVOL1";
const MAX_HEADER: usize = 256;

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let d = vol.dims();
    let header = format!("{MAGIC} {} {} {} {}\n", d.h, d.w, d.t, d.c);
    let mut out = Vec::with_capacity(header.len() + 4 * d.len());
    out.extend_from_slice(header.as_bytes());
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let fmt = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt(0, "missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| fmt(0, "header is not ASCII".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(fmt(0, format!("bad magic, expected `{MAGIC}`")));
    }
    let nums: Vec<usize> = fields
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| fmt(0, format!("malformed header `{header}`")))?;
    let [h, w, t, c] = nums[..] else {
        return Err(fmt(0, format!("header needs 4 dimensions, got `{header}`")));
    };
    if h == 0 || w == 0 || t == 0 || c == 0 {
        return Err(fmt(0, format!("zero dimension in header `{header}`")));
    }
    let dims = Dims::new(h, w, t, c);
    let start = nl + 1;
    let expected = dims
        .len()
        .checked_mul(4)
        .ok_or_else(|| fmt(0, "dimensions overflow".into()))?;
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(fmt(
            start + actual.min(expected),
            format!("payload has {actual} bytes, expected {expected}"),
        ));
    }
    let mut data = Vec::with_capacity(dims.len());
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(fmt(start + 4 * i, "non-finite sample".into()));
        }
        data.push(v);
    }
    Volume::new(dims, data)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    write_atomic(path, &encode_volume(vol))
}
