//! On-disk formats: the internal raw volume container, the supported NIfTI-1
//! subset, and the model checkpoint file.

pub mod model;
pub mod nifti;
pub mod raw;

use std::io;
use std::path::{Path, PathBuf};

use svox_core::volume::{Volume, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: unrecognized format (neither internal raw nor NIfTI-1)")]
    UnrecognizedFormat { path: PathBuf },
    #[error("{path}: malformed at byte offset {offset}: {what}")]
    Malformed { path: PathBuf, offset: usize, what: String },
    #[error("{path}: unsupported NIfTI datatype code {code} at byte offset {offset}")]
    UnsupportedDataType { path: PathBuf, code: i16, offset: usize },
    #[error("{path}: truncated payload at byte offset {offset}: need {needed} more bytes")]
    Truncated { path: PathBuf, offset: usize, needed: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: invalid volume: {source}")]
    Volume { path: PathBuf, source: VolumeError },
    #[error("{path}: bad header JSON: {what}")]
    BadJson { path: PathBuf, what: String },
    #[error("{path}: checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { path: PathBuf, stored: u64, computed: u64 },
    #[error("{path}: unsupported format version {0}", .version)]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{path}: model file does not match its config: {what}")]
    ModelMismatch { path: PathBuf, what: String },
}

pub(crate) fn io_err(path: &Path, source: io::Error) -> FormatError {
    FormatError::Io { path: path.to_path_buf(), source }
}

/// FNV-1a 64-bit, used for model-file payload checksums and input manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Read any supported volume file, dispatching on its magic bytes.
pub fn read_volume(path: &Path) -> Result<Volume, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() >= raw::MAGIC.len() && bytes[..raw::MAGIC.len()] == raw::MAGIC {
        return raw::parse(path, &bytes);
    }
    if bytes.len() >= 348 && &bytes[344..348] == b"n+1\0" {
        return nifti::parse(path, &bytes);
    }
    Err(FormatError::UnrecognizedFormat { path: path.to_path_buf() })
}

/// Write a volume; `.nii` paths get the NIfTI-1 subset, everything else the
/// internal raw format.
pub fn write_volume(v: &Volume, path: &Path) -> Result<(), FormatError> {
    let bytes = if path.extension().is_some_and(|e| e == "nii") {
        nifti::encode(v)
    } else {
        raw::encode(v)
    };
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub(crate) fn read_u32_le(path: &Path, bytes: &[u8], offset: usize) -> Result<u32, FormatError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: end - bytes.len(),
        });
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}
