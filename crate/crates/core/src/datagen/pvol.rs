//! PVOL volume files.
//!
//! ```text
//! PVOL1\n
//! dims=<D> <H> <W> <C>\n
//! dtype=f32le\n
//! \n
//! <D·H·W·C little-endian f32, depth slowest>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::ImageVolume;

const MAGIC: &str = "PVOL1";
const DTYPE: &str = "dtype=f32le";

pub fn encode_pvol(vol: &ImageVolume) -> Vec<u8> {
    let header = format!(
        "{MAGIC}\ndims={} {} {} {}\n{DTYPE}\n\n",
        vol.depth, vol.height, vol.width, vol.channels
    );
    let mut out = Vec::with_capacity(header.len() + 4 * vol.data.len());
    out.extend_from_slice(header.as_bytes());
    for v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads one `\n`-terminated ASCII header line starting at `pos`.
fn header_line(bytes: &[u8], pos: usize) -> Result<(&str, usize)> {
    let rest = bytes.get(pos..).unwrap_or_default();
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(pos, "unterminated header line"))?;
    let line = std::str::from_utf8(&rest[..end])
        .map_err(|_| Error::format(pos, "header line is not ASCII"))?;
    Ok((line, pos + end + 1))
}

pub fn decode_pvol(bytes: &[u8]) -> Result<ImageVolume> {
    let (magic, pos) = header_line(bytes, 0)?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:?}, expected {MAGIC:?}"),
        ));
    }
    let dims_at = pos;
    let (dims_line, pos) = header_line(bytes, pos)?;
    let dims: Vec<usize> = dims_line
        .strip_prefix("dims=")
        .ok_or_else(|| Error::format(dims_at, "expected dims= line"))?
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(dims_at, format!("unparseable dims {dims_line:?}")))?;
    if dims.len() != 4 {
        return Err(Error::format(
            dims_at,
            format!("expected 4 dims, got {}", dims.len()),
        ));
    }
    let dtype_at = pos;
    let (dtype, pos) = header_line(bytes, pos)?;
    if dtype != DTYPE {
        return Err(Error::format(dtype_at, format!("unsupported {dtype:?}")));
    }
    let (blank, payload_at) = header_line(bytes, pos)?;
    if !blank.is_empty() {
        return Err(Error::format(pos, "header must end with an empty line"));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(dims_at, "dims overflow"))?;
    let payload = &bytes[payload_at..];
    let expected = count * 4;
    if payload.len() < expected {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated payload: {} of {expected} bytes for dims {dims:?}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            payload_at + expected,
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::format(
                payload_at + 4 * i,
                format!("value {v} is not a finite intensity in [0, 1]"),
            ));
        }
        data.push(v);
    }
    ImageVolume::new(dims[0], dims[1], dims[2], dims[3], data)
}

pub fn write_volume(path: &Path, vol: &ImageVolume) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_pvol(vol))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<ImageVolume> {
    decode_pvol(&fs::read(path)?)
}
