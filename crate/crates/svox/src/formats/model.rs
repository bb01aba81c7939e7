//! Model checkpoint file: magic "SVOXNET1", u32 format version,
//! length-prefixed JSON metadata (config, orientation, normalization,
//! parameter count), per-layer little-endian f32 weight/bias arrays in
//! topology order, and a trailing FNV-1a64 checksum of everything after the
//! magic. Save/load round-trips bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use svox_core::model::{build_network, count_params, ModelConfig, Network};
use svox_core::sampler::NormalizationSpec;
use svox_core::volume::{Orientation, OrientationTag};

use super::{fnv1a64, io_err, FormatError};

pub const MAGIC: &[u8; 8] = b"SVOXNET1";
pub const VERSION: u32 = 1;

/// Self-describing metadata stored in the file's JSON blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub orientation: OrientationTag,
    pub normalization: NormalizationSpec,
    pub param_count: usize,
}

pub struct SavedModel {
    pub network: Network,
    pub meta: ModelMeta,
}

impl SavedModel {
    pub fn orientation(&self) -> Orientation {
        Orientation::from_tag(self.meta.orientation)
    }
}

pub fn encode(net: &Network, orientation: OrientationTag, norm: &NormalizationSpec) -> Vec<u8> {
    let meta = ModelMeta {
        config: net.config.clone(),
        orientation,
        normalization: norm.clone(),
        param_count: count_params(net),
    };
    let json = serde_json::to_vec(&meta).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, layer) in net.layers() {
        for &w in &layer.params.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in &layer.params.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out[MAGIC.len()..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn save_model(
    net: &Network,
    orientation: OrientationTag,
    norm: &NormalizationSpec,
    path: &Path,
) -> Result<(), FormatError> {
    std::fs::write(path, encode(net, orientation, norm)).map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<SavedModel, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode(path, &bytes)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<SavedModel, FormatError> {
    let pb = || path.to_path_buf();
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::UnrecognizedFormat { path: pb() });
    }
    if bytes.len() < MAGIC.len() + 8 + 8 {
        return Err(FormatError::Truncated { path: pb(), offset: bytes.len(), needed: 16 });
    }
    let version = super::read_u32_le(path, bytes, MAGIC.len())?;
    if version != VERSION {
        return Err(FormatError::BadVersion { path: pb(), version });
    }
    let stored =
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 checksum bytes"));
    let computed = fnv1a64(&bytes[MAGIC.len()..bytes.len() - 8]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { path: pb(), stored, computed });
    }
    let json_len = super::read_u32_le(path, bytes, MAGIC.len() + 4)? as usize;
    let json_start = MAGIC.len() + 8;
    let json_end = json_start + json_len;
    if bytes.len() < json_end + 8 {
        return Err(FormatError::Truncated {
            path: pb(),
            offset: bytes.len(),
            needed: json_end + 8 - bytes.len(),
        });
    }
    let meta: ModelMeta = serde_json::from_slice(&bytes[json_start..json_end])
        .map_err(|e| FormatError::BadJson { path: pb(), what: e.to_string() })?;

    let mut network = build_network(&meta.config)
        .map_err(|e| FormatError::ModelMismatch { path: pb(), what: e.to_string() })?;
    let mut cursor = json_end;
    let payload_end = bytes.len() - 8;
    for layer in network.layers_mut() {
        for slot in layer.params.weights.iter_mut().chain(layer.params.bias.iter_mut()) {
            if cursor + 4 > payload_end {
                return Err(FormatError::Truncated {
                    path: pb(),
                    offset: cursor,
                    needed: cursor + 4 - payload_end,
                });
            }
            *slot = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            cursor += 4;
        }
    }
    if cursor != payload_end {
        return Err(FormatError::ModelMismatch {
            path: pb(),
            what: format!("{} trailing weight bytes", payload_end - cursor),
        });
    }
    if meta.param_count != count_params(&network) {
        return Err(FormatError::ModelMismatch {
            path: pb(),
            what: format!(
                "declared param_count {} vs topology's {}",
                meta.param_count,
                count_params(&network)
            ),
        });
    }
    Ok(SavedModel { network, meta })
}

/// Canonical checkpoint file name for one orientation.
pub fn model_file_name(tag: OrientationTag) -> String {
    format!("model_{}.svoxnet", tag.as_str())
}
