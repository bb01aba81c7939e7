//! Headmask construction: Otsu thresholding, largest 6-connected foreground
//! component, and cavity filling.
//!
//! Thresholding alone leaves CSF/bone interior below threshold and stray
//! noise components above it, so the mask recipe is
//! `threshold -> keep largest component -> fill enclosed cavities`.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::volume::{Mask, Volume, VolumeError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HeadmaskError {
    #[error("degenerate histogram: volume is constant")]
    DegenerateHistogram,
    #[error("need at least 2 histogram bins, got {0}")]
    TooFewBins(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Bin-edge threshold maximizing between-class variance of the `bins`-bin
/// histogram over `[min, max]`. Ties break toward the lowest qualifying
/// threshold. Voxels `>= threshold` are foreground.
pub fn otsu_threshold(v: &Volume, bins: usize) -> Result<f32, HeadmaskError> {
    if bins < 2 {
        return Err(HeadmaskError::TooFewBins(bins));
    }
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(HeadmaskError::DegenerateHistogram);
    }
    let mut counts = vec![0u64; bins];
    let scale = bins as f64 / (hi as f64 - lo as f64);
    for &x in &v.data {
        let mut b = ((x as f64 - lo as f64) * scale) as usize;
        if b >= bins {
            b = bins - 1; // x == max lands in the last bin
        }
        counts[b] += 1;
    }
    let cut = otsu_cut_index(&counts);
    Ok(bin_edge(lo, hi, bins, cut))
}

/// Value of the upper edge of bin `cut` (the threshold separating bins
/// `0..=cut` from `cut+1..`).
pub fn bin_edge(lo: f32, hi: f32, bins: usize, cut: usize) -> f32 {
    (lo as f64 + (cut as f64 + 1.0) * (hi as f64 - lo as f64) / bins as f64) as f32
}

/// Index `k` of the cut between bins `k` and `k+1` maximizing between-class
/// variance; first (lowest) maximum wins. Bin index serves as the bin's
/// representative value, which preserves the argmax.
pub fn otsu_cut_index(counts: &[u64]) -> usize {
    let total: u64 = counts.iter().sum();
    let total_f = total as f64;
    let mut sum_all = 0.0f64;
    for (i, &c) in counts.iter().enumerate() {
        sum_all += i as f64 * c as f64;
    }
    let mut best_k = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for k in 0..counts.len() - 1 {
        w0 += counts[k] as f64;
        sum0 += k as f64 * counts[k] as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    best_k
}

const NEIGHBORS_6: [[isize; 3]; 6] =
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Flood-fill labels of 6-connected components of `fg`. Returns labels
/// (usize::MAX where background) and per-component sizes.
fn label_components(dims: [usize; 3], fg: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let n = fg.len();
    let mut labels = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let (dx, dy, dz) = (dims[0] as isize, dims[1] as isize, dims[2] as isize);
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !fg[start] || labels[start] != usize::MAX {
            continue;
        }
        let label = sizes.len();
        let mut size = 0usize;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let x = (i % dims[0]) as isize;
            let y = ((i / dims[0]) % dims[1]) as isize;
            let z = (i / (dims[0] * dims[1])) as isize;
            for d in NEIGHBORS_6 {
                let (nx, ny, nz) = (x + d[0], y + d[1], z + d[2]);
                if nx < 0 || ny < 0 || nz < 0 || nx >= dx || ny >= dy || nz >= dz {
                    continue;
                }
                let j = (nx + dx * (ny + dy * nz)) as usize;
                if fg[j] && labels[j] == usize::MAX {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keep only the largest 6-connected foreground component (earliest component
/// wins ties, which is deterministic under the scan order).
pub fn largest_component(dims: [usize; 3], fg: &[bool]) -> Vec<bool> {
    let (labels, sizes) = label_components(dims, fg);
    if sizes.is_empty() {
        return vec![false; fg.len()];
    }
    let mut best = 0usize;
    for (i, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = i;
        }
    }
    labels.iter().map(|&l| l == best).collect()
}

/// Set to foreground every background voxel not 6-connected to the volume
/// boundary (i.e. fill fully-enclosed cavities).
pub fn fill_holes(dims: [usize; 3], fg: &[bool]) -> Vec<bool> {
    let n = fg.len();
    let (dx, dy, dz) = (dims[0] as isize, dims[1] as isize, dims[2] as isize);
    let mut outside = vec![false; n];
    let mut queue = VecDeque::new();
    let push = |queue: &mut VecDeque<usize>, outside: &mut Vec<bool>, i: usize| {
        if !fg[i] && !outside[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    };
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if x == 0 || y == 0 || z == 0 || x == dims[0] - 1 || y == dims[1] - 1 || z == dims[2] - 1
                {
                    push(&mut queue, &mut outside, x + dims[0] * (y + dims[1] * z));
                }
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let x = (i % dims[0]) as isize;
        let y = ((i / dims[0]) % dims[1]) as isize;
        let z = (i / (dims[0] * dims[1])) as isize;
        for d in NEIGHBORS_6 {
            let (nx, ny, nz) = (x + d[0], y + d[1], z + d[2]);
            if nx < 0 || ny < 0 || nz < 0 || nx >= dx || ny >= dy || nz >= dz {
                continue;
            }
            push(&mut queue, &mut outside, (nx + dx * (ny + dy * nz)) as usize);
        }
    }
    (0..n).map(|i| fg[i] || !outside[i]).collect()
}

/// Otsu threshold (256 bins), keep the largest 6-connected component, fill
/// fully-enclosed cavities.
pub fn compute_headmask(v: &Volume) -> Result<Mask, HeadmaskError> {
    let t = otsu_threshold(v, 256)?;
    let fg: Vec<bool> = v.data.iter().map(|&x| x >= t).collect();
    let fg = largest_component(v.dims, &fg);
    let fg = fill_holes(v.dims, &fg);
    Ok(Mask { dims: v.dims, bits: fg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IntensityUnits;
    use alloc::vec::Vec;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume {
        Volume::new(dims, [1.0; 3], data, IntensityUnits::ArbitraryMr).unwrap()
    }

    /// Independent oracle: exhaustive search over all cut points using the
    /// same between-class variance objective, computed directly.
    fn otsu_bruteforce(counts: &[u64]) -> usize {
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 0..counts.len() - 1 {
            let w0: f64 = counts[..=k].iter().map(|&c| c as f64).sum();
            let w1 = total - w0;
            if w0 == 0.0 || w1 == 0.0 {
                continue;
            }
            let m0: f64 =
                counts[..=k].iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / w0;
            let m1: f64 = counts[k + 1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| (k + 1 + i) as f64 * c as f64)
                .sum::<f64>()
                / w1;
            let var = w0 * w1 * (m0 - m1) * (m0 - m1);
            if var > best.1 {
                best = (k, var);
            }
        }
        best.0
    }

    #[test]
    fn perfectly_bimodal_volume_splits_exactly() {
        // 60% zeros, 40% value-100
        let mut data = alloc::vec![0.0f32; 60];
        data.extend(alloc::vec![100.0f32; 40]);
        let v = vol([10, 10, 1], data);
        let t = otsu_threshold(&v, 256).unwrap();
        assert!(t > 0.0 && t < 100.0, "threshold {t} not strictly between modes");
        let fg: Vec<bool> = v.data.iter().map(|&x| x >= t).collect();
        assert_eq!(fg.iter().filter(|&&b| b).count(), 40);
    }

    #[test]
    fn four_bin_case_matches_exhaustive_search() {
        // histogram counts (4,0,2,2) over [0,4]
        let data = alloc::vec![0.0, 0.0, 0.0, 0.0, 2.2, 2.8, 3.5, 4.0];
        let v = vol([8, 1, 1], data);
        let counts = [4u64, 0, 2, 2];
        let want = bin_edge(0.0, 4.0, 4, otsu_bruteforce(&counts));
        assert_eq!(otsu_threshold(&v, 4).unwrap(), want);
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let v = vol([2, 2, 2], alloc::vec![5.0; 8]);
        assert_eq!(otsu_threshold(&v, 256), Err(HeadmaskError::DegenerateHistogram));
        assert!(compute_headmask(&v).is_err());
    }

    #[test]
    fn cut_index_matches_bruteforce_on_random_histograms() {
        use rand::Rng;
        let mut rng = crate::rng::stream(2024, 90, 0);
        for _ in 0..1000 {
            let bins = rng.random_range(2..40usize);
            let mut counts = alloc::vec![0u64; bins];
            for c in counts.iter_mut() {
                *c = rng.random_range(0..50u64);
            }
            if counts.iter().sum::<u64>() == 0 {
                counts[0] = 1;
                counts[bins - 1] = 1;
            }
            assert_eq!(otsu_cut_index(&counts), otsu_bruteforce(&counts), "counts {counts:?}");
        }
    }

    fn ellipsoid_volume(dims: [usize; 3], c: [f32; 3], r: [f32; 3], inside: f32) -> Volume {
        let mut data = alloc::vec![0.0f32; dims[0] * dims[1] * dims[2]];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let e = [(x as f32 - c[0]) / r[0], (y as f32 - c[1]) / r[1], (z as f32 - c[2]) / r[2]];
                    if e[0] * e[0] + e[1] * e[1] + e[2] * e[2] <= 1.0 {
                        data[x + dims[0] * (y + dims[1] * z)] = inside;
                    }
                }
            }
        }
        vol(dims, data)
    }

    #[test]
    fn noiseless_phantom_head_mask_is_exact() {
        let dims = [24, 24, 24];
        let v = ellipsoid_volume(dims, [11.5; 3], [8.0, 7.0, 9.0], 100.0);
        let m = compute_headmask(&v).unwrap();
        for i in 0..v.data.len() {
            assert_eq!(m.bits[i], v.data[i] > 0.0);
        }
    }

    #[test]
    fn interior_cavity_is_filled() {
        let dims = [20, 20, 20];
        let mut v = ellipsoid_volume(dims, [9.5; 3], [7.0, 7.0, 7.0], 100.0);
        // carve a zero-intensity cavity strictly inside
        for z in 8..12 {
            for y in 8..12 {
                for x in 8..12 {
                    let i = x + dims[0] * (y + dims[1] * z);
                    v.data[i] = 0.0;
                }
            }
        }
        let m = compute_headmask(&v).unwrap();
        for z in 8..12 {
            for y in 8..12 {
                for x in 8..12 {
                    assert!(m.get(x, y, z), "cavity voxel ({x},{y},{z}) not filled");
                }
            }
        }
    }

    /// Oracle: flood-fill component labeling, independent of the
    /// largest-component selection path.
    #[test]
    fn two_blobs_keep_only_larger() {
        let dims = [40, 16, 16];
        let mut data = alloc::vec![0.0f32; dims[0] * dims[1] * dims[2]];
        let mut put = |c: [f32; 3], r: f32| {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let d = [(x as f32 - c[0]) / r, (y as f32 - c[1]) / r, (z as f32 - c[2]) / r];
                        if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0 {
                            data[x + dims[0] * (y + dims[1] * z)] = 100.0;
                        }
                    }
                }
            }
        };
        put([10.0, 8.0, 8.0], 6.0); // large
        put([30.0, 8.0, 8.0], 2.5); // small, 10x fewer voxels
        let v = vol(dims, data);
        let m = compute_headmask(&v).unwrap();
        let (labels, sizes) = label_components(dims, &v.data.iter().map(|&x| x > 0.0).collect::<Vec<_>>());
        let biggest = (0..sizes.len()).max_by_key(|&i| sizes[i]).unwrap();
        for i in 0..m.bits.len() {
            assert_eq!(m.bits[i], labels[i] == biggest);
        }
    }

    #[test]
    fn headmask_is_idempotent_on_its_own_support() {
        let dims = [20, 20, 20];
        let v = ellipsoid_volume(dims, [9.5; 3], [7.0, 6.0, 7.5], 80.0);
        let m1 = compute_headmask(&v).unwrap();
        let support = vol(dims, m1.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
        let m2 = compute_headmask(&support).unwrap();
        assert_eq!(m1, m2);
    }
}
