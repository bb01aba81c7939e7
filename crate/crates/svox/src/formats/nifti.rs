//! NIfTI-1 subset: single-file uncompressed `.nii`, little-endian, 348-byte
//! header, `dim[0] == 3`, datatypes uint8/int16/float32. `scl_slope` and
//! `scl_inter` are applied on read (slope 0 treated as 1). Writing always
//! emits float32 with slope 1 / inter 0.

use std::path::Path;

use svox_core::volume::{IntensityUnits, Volume};

use super::FormatError;

// header field byte offsets (NIfTI-1)
const SIZEOF_HDR: usize = 0;
const DIM: usize = 40;
const DATATYPE: usize = 70;
const BITPIX: usize = 72;
const PIXDIM: usize = 76;
const VOX_OFFSET: usize = 108;
const SCL_SLOPE: usize = 112;
const SCL_INTER: usize = 116;
const MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn rd_i16(bytes: &[u8], o: usize) -> i16 {
    i16::from_le_bytes(bytes[o..o + 2].try_into().unwrap())
}

fn rd_i32(bytes: &[u8], o: usize) -> i32 {
    i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
}

fn rd_f32(bytes: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
}

pub fn parse(path: &Path, bytes: &[u8]) -> Result<Volume, FormatError> {
    let bad = |offset: usize, what: &str| FormatError::Malformed {
        path: path.to_path_buf(),
        offset,
        what: what.to_string(),
    };
    if rd_i32(bytes, SIZEOF_HDR) != 348 {
        return Err(bad(SIZEOF_HDR, "sizeof_hdr != 348 (big-endian files are not supported)"));
    }
    let ndim = rd_i16(bytes, DIM);
    if ndim != 3 {
        return Err(bad(DIM, "dim[0] != 3"));
    }
    let nx = rd_i16(bytes, DIM + 2);
    let ny = rd_i16(bytes, DIM + 4);
    let nz = rd_i16(bytes, DIM + 6);
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(bad(DIM + 2, "non-positive dimension"));
    }
    let dims = [nx as usize, ny as usize, nz as usize];
    let datatype = rd_i16(bytes, DATATYPE);
    let bitpix = rd_i16(bytes, BITPIX);
    let elem = match datatype {
        DT_UINT8 => 1usize,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        code => {
            return Err(FormatError::UnsupportedDataType {
                path: path.to_path_buf(),
                code,
                offset: DATATYPE,
            })
        }
    };
    if bitpix as usize != elem * 8 {
        return Err(bad(BITPIX, "bitpix disagrees with datatype"));
    }
    let mut spacing = [0.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = rd_f32(bytes, PIXDIM + 4 * (i + 1));
        *s = if p.is_finite() && p > 0.0 { p } else { 1.0 };
    }
    let vox_offset = rd_f32(bytes, VOX_OFFSET);
    if !vox_offset.is_finite() || vox_offset < 348.0 {
        return Err(bad(VOX_OFFSET, "vox_offset below header size"));
    }
    let vox_offset = vox_offset as usize;
    let slope_raw = rd_f32(bytes, SCL_SLOPE);
    let slope = if slope_raw == 0.0 || !slope_raw.is_finite() { 1.0 } else { slope_raw };
    let inter = {
        let v = rd_f32(bytes, SCL_INTER);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };

    let n = dims[0] * dims[1] * dims[2];
    let need_end = vox_offset + n * elem;
    if bytes.len() < need_end {
        return Err(FormatError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: need_end - bytes.len(),
        });
    }
    let payload = &bytes[vox_offset..need_end];
    let data: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| slope * b as f32 + inter).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| slope * i16::from_le_bytes(c.try_into().unwrap()) as f32 + inter)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| slope * f32::from_le_bytes(c.try_into().unwrap()) + inter)
            .collect(),
        _ => unreachable!(),
    };
    Volume::new(dims, spacing, data, IntensityUnits::ArbitraryMr)
        .map_err(|e| FormatError::Volume { path: path.to_path_buf(), source: e })
}

/// Encode as float32 `.nii`, vox_offset 352, slope 1 / inter 0.
pub fn encode(v: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[SIZEOF_HDR..SIZEOF_HDR + 4].copy_from_slice(&348i32.to_le_bytes());
    let dims16 = [3i16, v.dims[0] as i16, v.dims[1] as i16, v.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims16.iter().enumerate() {
        h[DIM + 2 * i..DIM + 2 * i + 2].copy_from_slice(&d.to_le_bytes());
    }
    h[DATATYPE..DATATYPE + 2].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    h[BITPIX..BITPIX + 2].copy_from_slice(&32i16.to_le_bytes());
    let pix = [1.0f32, v.spacing_mm[0], v.spacing_mm[1], v.spacing_mm[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pix.iter().enumerate() {
        h[PIXDIM + 4 * i..PIXDIM + 4 * i + 4].copy_from_slice(&p.to_le_bytes());
    }
    h[VOX_OFFSET..VOX_OFFSET + 4].copy_from_slice(&352.0f32.to_le_bytes());
    h[SCL_SLOPE..SCL_SLOPE + 4].copy_from_slice(&1.0f32.to_le_bytes());
    h[SCL_INTER..SCL_INTER + 4].copy_from_slice(&0.0f32.to_le_bytes());
    h[MAGIC..MAGIC + 4].copy_from_slice(b"n+1\0");
    let mut out = h;
    out.reserve(v.data.len() * 4);
    for &x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}
