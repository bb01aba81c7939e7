//! Volumes, masks, and axis-permutation reorientation.
//!
//! A [`Volume`] is a 3-D scalar grid in X-fastest layout with voxel spacing in
//! millimetres. Reorientation is a pure axis permutation that moves the
//! through-plane axis last; no resampling ever happens, so a reorient followed
//! by its inverse is the identity on voxel data.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VolumeError {
    #[error("dims must all be positive, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], len: usize },
    #[error("non-finite voxel value at linear index {0}")]
    NonFinite(usize),
    #[error("voxel spacing must be positive, got {0:?}")]
    NonPositiveSpacing([f32; 3]),
    #[error("axis permutation {0:?} is not a bijection of (0,1,2)")]
    BadPermutation([usize; 3]),
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    MaskDimsMismatch { mask: [usize; 3], volume: [usize; 3] },
    #[error("mask has no foreground voxels")]
    EmptyMask,
}

/// What the voxel values mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityUnits {
    ArbitraryMr,
    Hounsfield,
}

/// Anatomical orientation tag; also names which axis is through-plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationTag {
    Axial,
    Coronal,
    Sagittal,
}

impl OrientationTag {
    pub const ALL: [OrientationTag; 3] = [
        OrientationTag::Axial,
        OrientationTag::Coronal,
        OrientationTag::Sagittal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OrientationTag::Axial => "axial",
            OrientationTag::Coronal => "coronal",
            OrientationTag::Sagittal => "sagittal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "axial" => Some(OrientationTag::Axial),
            "coronal" => Some(OrientationTag::Coronal),
            "sagittal" => Some(OrientationTag::Sagittal),
            _ => None,
        }
    }
}

/// An orientation: tag plus the permutation mapping canonical axes to
/// (in-plane-1, in-plane-2, through-plane). `axis_permutation[i]` is the
/// canonical axis that becomes output axis `i`; the through-plane axis is
/// always last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientation {
    pub tag: OrientationTag,
    pub axis_permutation: [usize; 3],
}

impl Orientation {
    /// Identity: through-plane is Z.
    pub fn axial() -> Self {
        Orientation { tag: OrientationTag::Axial, axis_permutation: [0, 1, 2] }
    }

    /// Through-plane is Y: output axes (X, Z, Y).
    pub fn coronal() -> Self {
        Orientation { tag: OrientationTag::Coronal, axis_permutation: [0, 2, 1] }
    }

    /// Through-plane is X: output axes (Y, Z, X).
    pub fn sagittal() -> Self {
        Orientation { tag: OrientationTag::Sagittal, axis_permutation: [1, 2, 0] }
    }

    pub fn from_tag(tag: OrientationTag) -> Self {
        match tag {
            OrientationTag::Axial => Self::axial(),
            OrientationTag::Coronal => Self::coronal(),
            OrientationTag::Sagittal => Self::sagittal(),
        }
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let p = self.axis_permutation;
        let mut seen = [false; 3];
        for &a in &p {
            if a > 2 || seen[a] {
                return Err(VolumeError::BadPermutation(p));
            }
            seen[a] = true;
        }
        Ok(())
    }

    /// Permutation that undoes this orientation.
    pub fn inverse_permutation(&self) -> [usize; 3] {
        let p = self.axis_permutation;
        let mut inv = [0usize; 3];
        for (i, &a) in p.iter().enumerate() {
            inv[a] = i;
        }
        inv
    }
}

/// 3-D scalar grid, X-fastest layout: `data[x + dims[0]*(y + dims[1]*z)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub data: Vec<f32>,
    pub units: IntensityUnits,
    pub orientation: OrientationTag,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f32; 3],
        data: Vec<f32>,
        units: IntensityUnits,
    ) -> Result<Self, VolumeError> {
        let v = Volume { dims, spacing_mm, data, units, orientation: OrientationTag::Axial };
        v.validate()?;
        Ok(v)
    }

    /// Zero-filled volume with 1 mm spacing, MR units.
    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            spacing_mm: [1.0; 3],
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
            units: IntensityUnits::ArbitraryMr,
            orientation: OrientationTag::Axial,
        }
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims(self.dims));
        }
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        if self.data.len() != n {
            return Err(VolumeError::LengthMismatch { dims: self.dims, len: self.data.len() });
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::NonPositiveSpacing(self.spacing_mm));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(())
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn linear(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.linear(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

/// One boolean per voxel, same layout as the companion volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if bits.len() != dims[0] * dims[1] * dims[2] {
            return Err(VolumeError::LengthMismatch { dims, len: bits.len() });
        }
        Ok(Mask { dims, bits })
    }

    pub fn all_false(dims: [usize; 3]) -> Self {
        Mask { dims, bits: vec![false; dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    pub fn linear(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.linear(x, y, z)]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn check_dims(&self, v: &Volume) -> Result<(), VolumeError> {
        if self.dims != v.dims {
            return Err(VolumeError::MaskDimsMismatch { mask: self.dims, volume: v.dims });
        }
        Ok(())
    }

    /// Mask as a 0/1 float volume (unit spacing), for storage.
    pub fn to_volume(&self, spacing_mm: [f32; 3]) -> Volume {
        Volume {
            dims: self.dims,
            spacing_mm,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            units: IntensityUnits::ArbitraryMr,
            orientation: OrientationTag::Axial,
        }
    }

    pub fn from_volume(v: &Volume) -> Self {
        Mask { dims: v.dims, bits: v.data.iter().map(|&x| x > 0.5).collect() }
    }
}

fn permute_dims(dims: [usize; 3], perm: [usize; 3]) -> [usize; 3] {
    [dims[perm[0]], dims[perm[1]], dims[perm[2]]]
}

fn permute_spacing(s: [f32; 3], perm: [usize; 3]) -> [f32; 3] {
    [s[perm[0]], s[perm[1]], s[perm[2]]]
}

/// Relayout `data` (X-fastest over `dims`) so output axis `i` walks input axis
/// `perm[i]`. Returns the permuted buffer; output dims are `dims[perm[i]]`.
fn permute_data<T: Copy>(data: &[T], dims: [usize; 3], perm: [usize; 3]) -> Vec<T> {
    let nd = permute_dims(dims, perm);
    let mut out = Vec::with_capacity(data.len());
    // stride of input axis a in the input layout
    let strides = [1usize, dims[0], dims[0] * dims[1]];
    let s0 = strides[perm[0]];
    let s1 = strides[perm[1]];
    let s2 = strides[perm[2]];
    for c2 in 0..nd[2] {
        for c1 in 0..nd[1] {
            let base = c1 * s1 + c2 * s2;
            for c0 in 0..nd[0] {
                out.push(data[base + c0 * s0]);
            }
        }
    }
    out
}

/// Permute axes so the orientation's through-plane axis is last. Dims and
/// spacing are permuted consistently; pure permutation, no resampling.
pub fn reorient(v: &Volume, o: Orientation) -> Volume {
    let perm = o.axis_permutation;
    Volume {
        dims: permute_dims(v.dims, perm),
        spacing_mm: permute_spacing(v.spacing_mm, perm),
        data: permute_data(&v.data, v.dims, perm),
        units: v.units,
        orientation: o.tag,
    }
}

/// Undo [`reorient`]: bit-exact inverse on voxel data.
pub fn inverse_reorient(v: &Volume, o: Orientation) -> Volume {
    let perm = o.inverse_permutation();
    Volume {
        dims: permute_dims(v.dims, perm),
        spacing_mm: permute_spacing(v.spacing_mm, perm),
        data: permute_data(&v.data, v.dims, perm),
        units: v.units,
        orientation: OrientationTag::Axial,
    }
}

pub fn reorient_mask(m: &Mask, o: Orientation) -> Mask {
    let perm = o.axis_permutation;
    Mask { dims: permute_dims(m.dims, perm), bits: permute_data(&m.bits, m.dims, perm) }
}

/// Where voxel `(x,y,z)` of the canonical volume lands after [`reorient`].
pub fn permuted_coord(coord: [usize; 3], o: Orientation) -> [usize; 3] {
    let p = o.axis_permutation;
    [coord[p[0]], coord[p[1]], coord[p[2]]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeRole {
    Echo1,
    Echo2,
    Ct,
    Mask,
    ClassMap,
}

impl VolumeRole {
    pub fn file_stem(self) -> &'static str {
        match self {
            VolumeRole::Echo1 => "echo1",
            VolumeRole::Echo2 => "echo2",
            VolumeRole::Ct => "ct",
            VolumeRole::Mask => "mask",
            VolumeRole::ClassMap => "class_map",
        }
    }
}

/// Convenience label used in manifests/reports for which file supplied a mask.
pub type MaskSource = String;
