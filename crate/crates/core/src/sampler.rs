//! Mask-interior patch enumeration, extraction, normalization, and the
//! train/validation split.
//!
//! One patch center per true mask voxel, stride 1. Volumes are virtually
//! zero-padded, so border centers stay valid and the center count always
//! equals the mask cardinality. Out-of-bounds positions are exactly 0 in the
//! extracted (normalized) tensors, matching the network's zero-padding
//! convention.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::mathf;
use crate::rng;
use crate::tensor::{Shape5, Tensor5};
use crate::volume::{Mask, Orientation, Volume, VolumeError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplerError {
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("dims {0:?} exceed the u16 coordinate range")]
    DimsTooLarge([usize; 3]),
    #[error("pick {pick} out of range, index holds {len} centers")]
    PickOutOfRange { pick: usize, len: usize },
    #[error("need at least 4 centers to split, got {0}")]
    TooFewCenters(usize),
    #[error("MR std must be positive (channel {channel} is constant inside the mask)")]
    ZeroStd { channel: usize },
    #[error("volumes disagree on dims: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Enumerated patch centers for one oriented atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchIndex {
    /// (x, y, z) voxel coordinates in the reoriented grid, (z, y, x) ascending.
    pub centers: Vec<[u16; 3]>,
    pub orientation: Orientation,
    /// (in-plane, in-plane, through-plane), e.g. (25, 25, 5).
    pub patch_shape: [usize; 3],
}

/// Per-channel z-scoring for the MR inputs plus the CT target scale,
/// computed once on the atlas and stored with each model for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mr_mean: [f64; 2],
    pub mr_std: [f64; 2],
    pub ct_scale: f32,
}

impl NormalizationSpec {
    pub const DEFAULT_CT_SCALE: f32 = 1.0 / 1000.0;

    #[inline]
    pub fn normalize_mr(&self, channel: usize, v: f32) -> f32 {
        ((v as f64 - self.mr_mean[channel]) / self.mr_std[channel]) as f32
    }

    #[inline]
    pub fn scale_ct(&self, v: f32) -> f32 {
        v * self.ct_scale
    }

    #[inline]
    pub fn unscale_ct(&self, v: f32) -> f32 {
        (v as f64 / self.ct_scale as f64) as f32
    }
}

/// Mask-restricted mean/std of both echoes (f64 accumulation, scan order).
pub fn compute_normalization(
    echo1: &Volume,
    echo2: &Volume,
    mask: &Mask,
) -> Result<NormalizationSpec, SamplerError> {
    mask.check_dims(echo1)?;
    mask.check_dims(echo2)?;
    let mut spec = NormalizationSpec {
        mr_mean: [0.0; 2],
        mr_std: [0.0; 2],
        ct_scale: NormalizationSpec::DEFAULT_CT_SCALE,
    };
    for (channel, v) in [echo1, echo2].into_iter().enumerate() {
        let mut sum = 0.0f64;
        let mut count = 0u64;
        for (i, &b) in mask.bits.iter().enumerate() {
            if b {
                sum += v.data[i] as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(SamplerError::EmptyMask);
        }
        let mean = sum / count as f64;
        let mut ss = 0.0f64;
        for (i, &b) in mask.bits.iter().enumerate() {
            if b {
                let d = v.data[i] as f64 - mean;
                ss += d * d;
            }
        }
        let std = mathf::sqrt(ss / count as f64);
        if !(std > 0.0) {
            return Err(SamplerError::ZeroStd { channel });
        }
        spec.mr_mean[channel] = mean;
        spec.mr_std[channel] = std;
    }
    Ok(spec)
}

/// One center per true mask voxel in deterministic (z, y, x) ascending order.
/// The mask must already be in the target orientation.
pub fn enumerate_centers(
    mask: &Mask,
    orientation: Orientation,
    patch_shape: [usize; 3],
) -> Result<PatchIndex, SamplerError> {
    if mask.dims.iter().any(|&d| d > u16::MAX as usize) {
        return Err(SamplerError::DimsTooLarge(mask.dims));
    }
    let mut centers = Vec::new();
    let [nx, ny, nz] = mask.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.bits[x + nx * (y + ny * z)] {
                    centers.push([x as u16, y as u16, z as u16]);
                }
            }
        }
    }
    if centers.is_empty() {
        return Err(SamplerError::EmptyMask);
    }
    Ok(PatchIndex { centers, orientation, patch_shape })
}

/// Extract the picked patches as per-echo input tensors and the CT target,
/// all shaped (N, 1, through, in-plane, in-plane). MR channels are z-scored,
/// CT is multiplied by `ct_scale`, and out-of-bounds positions are exactly 0.
pub fn extract_batch(
    echo1: &Volume,
    echo2: &Volume,
    ct: &Volume,
    idx: &PatchIndex,
    picks: &[usize],
    norm: &NormalizationSpec,
) -> Result<(Tensor5, Tensor5, Tensor5), SamplerError> {
    if echo1.dims != echo2.dims {
        return Err(SamplerError::DimsMismatch { a: echo1.dims, b: echo2.dims });
    }
    if echo1.dims != ct.dims {
        return Err(SamplerError::DimsMismatch { a: echo1.dims, b: ct.dims });
    }
    let [ph, pw, pd] = idx.patch_shape;
    let shape = Shape5::new(picks.len(), 1, pd, ph, pw);
    let mut t1 = vec![0.0f32; shape.len()];
    let mut t2 = vec![0.0f32; shape.len()];
    let mut tt = vec![0.0f32; shape.len()];
    let (rh, rw, rd) = (ph / 2, pw / 2, pd / 2);
    let [nx, ny, nz] = echo1.dims;
    for (slot, &pick) in picks.iter().enumerate() {
        let center = *idx
            .centers
            .get(pick)
            .ok_or(SamplerError::PickOutOfRange { pick, len: idx.centers.len() })?;
        let (cx, cy, cz) = (center[0] as isize, center[1] as isize, center[2] as isize);
        let base = slot * pd * ph * pw;
        for dz in 0..pd {
            let z = cz + dz as isize - rd as isize;
            for dy in 0..ph {
                let y = cy + dy as isize - rh as isize;
                for dx in 0..pw {
                    let x = cx + dx as isize - rw as isize;
                    let o = base + (dz * ph + dy) * pw + dx;
                    if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize
                    {
                        continue; // virtual zero padding
                    }
                    let i = x as usize + nx * (y as usize + ny * z as usize);
                    t1[o] = norm.normalize_mr(0, echo1.data[i]);
                    t2[o] = norm.normalize_mr(1, echo2.data[i]);
                    tt[o] = norm.scale_ct(ct.data[i]);
                }
            }
        }
    }
    Ok((
        Tensor5::from_vec(shape, t1).expect("shape consistent"),
        Tensor5::from_vec(shape, t2).expect("shape consistent"),
        Tensor5::from_vec(shape, tt).expect("shape consistent"),
    ))
}

/// Disjoint, exhaustive 75/25 split (train gets the ceiling) from a seeded
/// uniform shuffle.
pub fn split_train_val(idx: &PatchIndex, seed: u64) -> Result<(Vec<usize>, Vec<usize>), SamplerError> {
    let n = idx.centers.len();
    if n < 4 {
        return Err(SamplerError::TooFewCenters(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, rng::purpose::SPLIT, 0);
    order.shuffle(&mut rng);
    // ceil(0.75 n) = n - floor(n / 4)
    let n_train = n - n / 4;
    let val = order.split_off(n_train);
    Ok((order, val))
}

/// Seeded per-epoch shuffle of the training picks.
pub fn shuffle_picks(picks: &mut [usize], seed: u64, epoch: u64) {
    let mut rng = rng::stream(seed, rng::purpose::EPOCH_SHUFFLE, epoch);
    picks.shuffle(&mut rng);
}
