//! Internal raw volume container: 16-byte magic, length-prefixed JSON header
//! (dims, spacing, units, orientation), then X-fastest little-endian f32
//! voxels. Write-then-read is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use svox_core::volume::{IntensityUnits, OrientationTag, Volume};

use super::FormatError;

pub const MAGIC: [u8; 16] = *b"SVOXVOL1\0\0\0\0\0\0\0\0";

#[derive(Serialize, Deserialize)]
struct RawHeader {
    dims: [usize; 3],
    spacing_mm: [f32; 3],
    units: IntensityUnits,
    orientation: OrientationTag,
}

pub fn encode(v: &Volume) -> Vec<u8> {
    let header = RawHeader {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        units: v.units,
        orientation: v.orientation,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + v.data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn parse(path: &Path, bytes: &[u8]) -> Result<Volume, FormatError> {
    let header_len = super::read_u32_le(path, bytes, MAGIC.len())? as usize;
    let json_start = MAGIC.len() + 4;
    let json_end = json_start + header_len;
    if bytes.len() < json_end {
        return Err(FormatError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: json_end - bytes.len(),
        });
    }
    let header: RawHeader = serde_json::from_slice(&bytes[json_start..json_end])
        .map_err(|e| FormatError::BadJson { path: path.to_path_buf(), what: e.to_string() })?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let payload_end = json_end + 4 * n;
    if bytes.len() < payload_end {
        return Err(FormatError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: payload_end - bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[json_end..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut v = Volume::new(header.dims, header.spacing_mm, data, header.units)
        .map_err(|e| FormatError::Volume { path: path.to_path_buf(), source: e })?;
    v.orientation = header.orientation;
    Ok(v)
}
