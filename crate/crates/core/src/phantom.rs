//! Deterministic paired-phantom generator.
//!
//! Each phantom is a head-like nested-ellipsoid scene: a bone shell around
//! soft tissue with fluid pockets and a lesion blob, on an empty background.
//! The tissue table maps each class to dual-echo MR means and a CT mean, and
//! is built to reproduce the ambiguity that motivates dual-echo inputs: bone
//! and fluid are both dark on the echoes yet sit ~1200 HU apart on CT, so a
//! voxelwise intensity map cannot separate them while neighborhood context
//! can.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::volume::{IntensityUnits, Mask, Volume};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PhantomError {
    #[error("dims {0:?} too small: every axis must be >= 32 to contain a training patch")]
    DimsTooSmall([usize; 3]),
    #[error("corpus needs at least 2 phantoms, got {0}")]
    CorpusTooSmall(usize),
}

/// Voxel class labels, stored in the class map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum TissueClass {
    Background = 0,
    Bone = 1,
    SoftTissue = 2,
    Fluid = 3,
    Lesion = 4,
}

impl TissueClass {
    pub const ALL: [TissueClass; 5] = [
        TissueClass::Background,
        TissueClass::Bone,
        TissueClass::SoftTissue,
        TissueClass::Fluid,
        TissueClass::Lesion,
    ];
}

/// Per-class channel means and noise level. `noise_sigma` applies to the MR
/// echoes directly and scaled by 1000 to the CT channel (HU).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub ute1_mean: f32,
    pub ute2_mean: f32,
    pub ct_hu_mean: f32,
    pub noise_sigma: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueTable {
    pub background: TissueParams,
    pub bone: TissueParams,
    pub soft_tissue: TissueParams,
    pub fluid: TissueParams,
    pub lesion: TissueParams,
}

impl TissueTable {
    pub fn get(&self, class: TissueClass) -> TissueParams {
        match class {
            TissueClass::Background => self.background,
            TissueClass::Bone => self.bone,
            TissueClass::SoftTissue => self.soft_tissue,
            TissueClass::Fluid => self.fluid,
            TissueClass::Lesion => self.lesion,
        }
    }
}

impl Default for TissueTable {
    fn default() -> Self {
        TissueTable {
            background: TissueParams { ute1_mean: 0.0, ute2_mean: 0.0, ct_hu_mean: -1000.0, noise_sigma: 0.0 },
            // bone: visible on the first echo, nearly gone on the second
            bone: TissueParams { ute1_mean: 0.16, ute2_mean: 0.05, ct_hu_mean: 1200.0, noise_sigma: 0.02 },
            soft_tissue: TissueParams { ute1_mean: 0.85, ute2_mean: 0.70, ct_hu_mean: 35.0, noise_sigma: 0.03 },
            // fluid shadows bone on both echoes but sits near water on CT
            fluid: TissueParams { ute1_mean: 0.18, ute2_mean: 0.06, ct_hu_mean: 8.0, noise_sigma: 0.02 },
            lesion: TissueParams { ute1_mean: 0.55, ute2_mean: 0.40, ct_hu_mean: 22.0, noise_sigma: 0.02 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f32; 3],
    pub semi_axes: [f32; 3],
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, x: f32, y: f32, z: f32) -> bool {
        let dx = (x - self.center[0]) / self.semi_axes[0];
        let dy = (y - self.center[1]) / self.semi_axes[1];
        let dz = (z - self.center[2]) / self.semi_axes[2];
        dx * dx + dy * dy + dz * dz <= 1.0
    }

    fn shrunk(&self, by: f32) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            semi_axes: [
                (self.semi_axes[0] - by).max(1.0),
                (self.semi_axes[1] - by).max(1.0),
                (self.semi_axes[2] - by).max(1.0),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub head: Ellipsoid,
    pub shell_thickness: f32,
    pub fluid: Vec<Ellipsoid>,
    pub lesion: Option<Ellipsoid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub seed: u64,
    pub tissues: TissueTable,
    pub geometry: PhantomGeometry,
}

impl PhantomSpec {
    /// Default 64^3 scene: head ellipsoid filling ~15% of the volume, a
    /// 2.8-voxel bone shell, two fluid pockets, one lesion.
    pub fn default_with(dims: [usize; 3], seed: u64) -> Self {
        let c = [
            (dims[0] as f32 - 1.0) / 2.0,
            (dims[1] as f32 - 1.0) / 2.0,
            (dims[2] as f32 - 1.0) / 2.0,
        ];
        let scale = dims[0].min(dims[1]).min(dims[2]) as f32 / 64.0;
        let head = Ellipsoid {
            center: c,
            semi_axes: [21.2 * scale, 19.3 * scale, 23.2 * scale],
        };
        PhantomSpec {
            dims,
            spacing_mm: [1.56, 1.56, 1.56],
            seed,
            tissues: TissueTable::default(),
            geometry: PhantomGeometry {
                head,
                shell_thickness: 2.8 * scale,
                fluid: vec![
                    Ellipsoid {
                        center: [c[0] - 5.0 * scale, c[1] + 3.0 * scale, c[2] + 2.0 * scale],
                        semi_axes: [5.0 * scale, 4.0 * scale, 6.0 * scale],
                    },
                    Ellipsoid {
                        center: [c[0] + 6.0 * scale, c[1] - 4.0 * scale, c[2] - 3.0 * scale],
                        semi_axes: [4.0 * scale, 4.5 * scale, 4.0 * scale],
                    },
                ],
                lesion: Some(Ellipsoid {
                    center: [c[0] + 7.0 * scale, c[1] + 6.0 * scale, c[2] + 5.0 * scale],
                    semi_axes: [4.0 * scale, 3.5 * scale, 4.0 * scale],
                }),
            },
        }
    }
}

/// Co-registered quadruple plus the generating class map.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub echo1: Volume,
    pub echo2: Volume,
    pub ct: Volume,
    pub mask: Mask,
    pub class_map: Vec<u8>,
}

fn classify(spec: &PhantomSpec, x: usize, y: usize, z: usize) -> TissueClass {
    let (fx, fy, fz) = (x as f32, y as f32, z as f32);
    let g = &spec.geometry;
    if !g.head.contains(fx, fy, fz) {
        return TissueClass::Background;
    }
    let inner = g.head.shrunk(g.shell_thickness);
    if !inner.contains(fx, fy, fz) {
        return TissueClass::Bone;
    }
    if let Some(lesion) = &g.lesion {
        if lesion.contains(fx, fy, fz) {
            return TissueClass::Lesion;
        }
    }
    for f in &g.fluid {
        if f.contains(fx, fy, fz) {
            return TissueClass::Fluid;
        }
    }
    TissueClass::SoftTissue
}

/// Deterministic per seed: class means plus per-class Gaussian noise. CT is a
/// function of class (plus noise), so the MR-to-CT mapping is learnable.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomPair, PhantomError> {
    if spec.dims.iter().any(|&d| d < 32) {
        return Err(PhantomError::DimsTooSmall(spec.dims));
    }
    let n = spec.dims[0] * spec.dims[1] * spec.dims[2];
    let mut class_map = vec![0u8; n];
    let mut e1 = vec![0.0f32; n];
    let mut e2 = vec![0.0f32; n];
    let mut ct = vec![0.0f32; n];
    let mut noise = rng::stream(spec.seed, rng::purpose::PHANTOM_NOISE, 0);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut i = 0usize;
    for z in 0..spec.dims[2] {
        for y in 0..spec.dims[1] {
            for x in 0..spec.dims[0] {
                let class = classify(spec, x, y, z);
                let t = spec.tissues.get(class);
                // fixed three draws per voxel keeps the stream layout stable
                let n1 = unit.sample(&mut noise) as f32;
                let n2 = unit.sample(&mut noise) as f32;
                let n3 = unit.sample(&mut noise) as f32;
                class_map[i] = class as u8;
                e1[i] = t.ute1_mean + t.noise_sigma * n1;
                e2[i] = t.ute2_mean + t.noise_sigma * n2;
                ct[i] = t.ct_hu_mean + t.noise_sigma * 1000.0 * n3;
                i += 1;
            }
        }
    }
    let mask = Mask {
        dims: spec.dims,
        bits: class_map.iter().map(|&c| c != TissueClass::Background as u8).collect(),
    };
    let mk = |data: Vec<f32>, units| Volume {
        dims: spec.dims,
        spacing_mm: spec.spacing_mm,
        data,
        units,
        orientation: crate::volume::OrientationTag::Axial,
    };
    Ok(PhantomPair {
        echo1: mk(e1, IntensityUnits::ArbitraryMr),
        echo2: mk(e2, IntensityUnits::ArbitraryMr),
        ct: mk(ct, IntensityUnits::Hounsfield),
        mask,
        class_map,
    })
}

/// `n` phantoms with per-seed jittered geometry; pair 0 is the atlas.
pub fn generate_corpus(
    n: usize,
    base_seed: u64,
    dims: [usize; 3],
) -> Result<Vec<(PhantomSpec, PhantomPair)>, PhantomError> {
    if n < 2 {
        return Err(PhantomError::CorpusTooSmall(n));
    }
    let mut out = Vec::with_capacity(n);
    for pair in 0..n {
        let mut spec = PhantomSpec::default_with(dims, base_seed.wrapping_add(pair as u64));
        let mut geo = rng::stream(base_seed, rng::purpose::PHANTOM_GEOMETRY, pair as u64);
        let mut jitter = |e: &mut Ellipsoid, pos: f32, size: f32| {
            for c in e.center.iter_mut() {
                *c += geo.random_range(-pos..=pos);
            }
            for s in e.semi_axes.iter_mut() {
                *s = (*s + geo.random_range(-size..=size)).max(1.5);
            }
        };
        jitter(&mut spec.geometry.head, 1.5, 1.5);
        for f in spec.geometry.fluid.iter_mut() {
            jitter(f, 2.0, 1.0);
        }
        if let Some(lesion) = spec.geometry.lesion.as_mut() {
            jitter(lesion, 2.5, 1.0);
        }
        let pair_data = generate(&spec)?;
        out.push((spec, pair_data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmask;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec::default_with([32, 32, 32], 5);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dims_below_patch_containment_are_rejected() {
        let spec = PhantomSpec::default_with([31, 64, 64], 5);
        assert_eq!(generate(&spec), Err(PhantomError::DimsTooSmall([31, 64, 64])));
    }

    #[test]
    fn zero_noise_makes_ct_a_function_of_the_echo_pair() {
        use std::collections::HashMap;
        let mut spec = PhantomSpec::default_with([32, 32, 32], 9);
        let zero = |t: &mut TissueParams| t.noise_sigma = 0.0;
        zero(&mut spec.tissues.background);
        zero(&mut spec.tissues.bone);
        zero(&mut spec.tissues.soft_tissue);
        zero(&mut spec.tissues.fluid);
        zero(&mut spec.tissues.lesion);
        let p = generate(&spec).unwrap();
        let mut seen: HashMap<(u32, u32), f32> = HashMap::new();
        for i in 0..p.class_map.len() {
            let key = (p.echo1.data[i].to_bits(), p.echo2.data[i].to_bits());
            let ct = p.ct.data[i];
            if let Some(&prev) = seen.get(&key) {
                assert_eq!(prev, ct, "echo pair must determine ct");
            } else {
                seen.insert(key, ct);
            }
        }
    }

    #[test]
    fn default_mask_fraction_is_in_the_committed_band() {
        let spec = PhantomSpec::default_with([64, 64, 64], 42);
        let p = generate(&spec).unwrap();
        let frac = p.mask.count_true() as f64 / (64.0 * 64.0 * 64.0);
        assert!((0.15..=0.65).contains(&frac), "mask fraction {frac}");
    }

    #[test]
    fn mask_matches_class_map_support_and_volumes_validate() {
        let spec = PhantomSpec::default_with([48, 40, 36], 11);
        let p = generate(&spec).unwrap();
        for v in [&p.echo1, &p.echo2, &p.ct] {
            v.validate().unwrap();
        }
        for (bit, class) in p.mask.bits.iter().zip(&p.class_map) {
            assert_eq!(*bit, *class != 0);
        }
    }

    #[test]
    fn bone_shell_encloses_the_interior() {
        let spec = PhantomSpec::default_with([48, 48, 48], 3);
        let p = generate(&spec).unwrap();
        // flood outside-background from the volume border; it must never
        // touch an interior (soft/fluid/lesion) voxel
        let interior_touchable = {
            let bg: Vec<bool> = p.class_map.iter().map(|&c| c == 0).collect();
            let filled = headmask::fill_holes(spec.dims, &bg.iter().map(|&b| !b).collect::<Vec<_>>());
            // any interior-class voxel outside the filled region would mean a leak
            p.class_map
                .iter()
                .zip(&filled)
                .any(|(&c, &inside)| (c == 2 || c == 3 || c == 4) && !inside)
        };
        assert!(!interior_touchable, "background leaks through the bone shell");
    }

    #[test]
    fn class_conditional_means_match_the_tissue_table() {
        let spec = PhantomSpec::default_with([64, 64, 64], 21);
        let p = generate(&spec).unwrap();
        for class in TissueClass::ALL {
            let t = spec.tissues.get(class);
            let idx: Vec<usize> =
                (0..p.class_map.len()).filter(|&i| p.class_map[i] == class as u8).collect();
            if idx.is_empty() {
                continue;
            }
            let n = idx.len() as f64;
            for (chan, mean, sigma) in [
                (&p.echo1, t.ute1_mean as f64, t.noise_sigma as f64),
                (&p.echo2, t.ute2_mean as f64, t.noise_sigma as f64),
                (&p.ct, t.ct_hu_mean as f64, t.noise_sigma as f64 * 1000.0),
            ] {
                let m = idx.iter().map(|&i| chan.data[i] as f64).sum::<f64>() / n;
                if sigma == 0.0 {
                    assert_eq!(m, mean);
                } else {
                    let tol = 3.0 * sigma / crate::mathf::sqrt(n);
                    assert!((m - mean).abs() < tol, "{class:?}: {m} vs {mean} (tol {tol})");
                }
            }
        }
    }

    #[test]
    fn corpus_has_distinct_geometries_and_atlas_first() {
        let corpus = generate_corpus(7, 42, [32, 32, 32]).unwrap();
        assert_eq!(corpus.len(), 7);
        for a in 0..corpus.len() {
            for b in a + 1..corpus.len() {
                let diff = corpus[a]
                    .1
                    .class_map
                    .iter()
                    .zip(&corpus[b].1.class_map)
                    .filter(|(x, y)| x != y)
                    .count();
                let frac = diff as f64 / corpus[a].1.class_map.len() as f64;
                assert!(frac > 0.01, "pairs {a},{b} differ by only {frac}");
            }
        }
        assert_eq!(generate_corpus(1, 42, [32, 32, 32]), Err(PhantomError::CorpusTooSmall(1)));
    }

    #[test]
    fn minimal_two_phantom_corpus_generates() {
        let corpus = generate_corpus(2, 7, [32, 32, 32]).unwrap();
        assert_eq!(corpus.len(), 2);
        assert!(corpus[0].1.mask.count_true() > 0);
        assert!(corpus[1].1.mask.count_true() > 0);
    }
}
