//! `QSMVOL1` volume files.
//!
//! Layout: 8-byte magic `QSMVOL1\n`, little-endian `u32` header length `H`,
//! `H` bytes of UTF-8 JSON (`dims`, `voxel_size_mm`, `unit`, optional
//! `b0_dir`), then `nx*ny*nz` little-endian `f32` values, x-fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, B0Direction, Unit, Volume};

pub const VOLUME_MAGIC: &[u8; 8] = b"QSMVOL1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b0_dir: Option<[f64; 3]>,
}

pub fn encode_volume(vol: &Volume) -> Result<Vec<u8>> {
    vol.ensure_finite()?;
    let header = Header {
        dims: vol.dims(),
        voxel_size_mm: vol.voxel_size(),
        unit: vol.unit().as_str().to_string(),
        b0_dir: vol.b0().map(|b| b.as_array()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * vol.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in vol.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(0));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 8 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::BadMagic { expected: "QSMVOL1\\n" });
    }
    if bytes.len() < 12 {
        return Err(Error::Header("missing header length".into()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < h {
        return Err(Error::Header(format!("header length {h} exceeds file size")));
    }
    let header: Header = serde_json::from_slice(&body[..h]).map_err(|e| Error::Header(e.to_string()))?;
    let n = voxel_count(header.dims)?;
    let unit = Unit::parse(&header.unit)?;
    let payload = &body[h..];
    let expected = n.checked_mul(4).ok_or(Error::DimOverflow(header.dims))?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, got: payload.len() });
    }
    if payload.len() != expected {
        return Err(Error::PayloadMismatch { expected, got: payload.len() });
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let b0 = header.b0_dir.map(B0Direction::new).transpose()?;
    Ok(Volume::new(header.dims, header.voxel_size_mm, unit, data)?.with_b0(b0))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

/// Writes via a temporary sibling file and a rename.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_volume(vol)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
