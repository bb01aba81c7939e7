//! Cross-module properties at phantom scale.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::time::Instant;

use svox_core::inference::predict_volume;
use svox_core::model::{build_network, ModelConfig};
use svox_core::phantom::{generate, PhantomSpec};
use svox_core::sampler::{compute_normalization, enumerate_centers, extract_batch};
use svox_core::volume::Orientation;

#[test]
fn normalized_patches_have_unit_stats_inside_the_mask() {
    let spec = PhantomSpec::default_with([48, 48, 48], 17);
    let pair = generate(&spec).unwrap();
    let norm = compute_normalization(&pair.echo1, &pair.echo2, &pair.mask).unwrap();
    let idx = enumerate_centers(&pair.mask, Orientation::axial(), [25, 25, 5]).unwrap();

    // gather normalized patch values at positions whose source voxel is
    // mask-true, over a deterministic subsample of the index
    let picks: Vec<usize> = (0..idx.centers.len()).step_by(37).collect();
    let (t1, t2, _) =
        extract_batch(&pair.echo1, &pair.echo2, &pair.ct, &idx, &picks, &norm).unwrap();
    let dims = pair.mask.dims;
    let mut acc = [(0.0f64, 0.0f64, 0u64); 2];
    for (slot, &pick) in picks.iter().enumerate() {
        let c = idx.centers[pick];
        for dz in 0..5isize {
            for dy in 0..25isize {
                for dx in 0..25isize {
                    let x = c[0] as isize + dx - 12;
                    let y = c[1] as isize + dy - 12;
                    let z = c[2] as isize + dz - 2;
                    if x < 0 || y < 0 || z < 0
                        || x >= dims[0] as isize
                        || y >= dims[1] as isize
                        || z >= dims[2] as isize
                    {
                        continue;
                    }
                    let vi = x as usize + dims[0] * (y as usize + dims[1] * z as usize);
                    if !pair.mask.bits[vi] {
                        continue;
                    }
                    let pi = ((slot * 5 + dz as usize) * 25 + dy as usize) * 25 + dx as usize;
                    for (a, t) in acc.iter_mut().zip([&t1, &t2]) {
                        let v = t.values()[pi] as f64;
                        a.0 += v;
                        a.1 += v * v;
                        a.2 += 1;
                    }
                }
            }
        }
    }
    for (chan, (s, ss, n)) in acc.iter().enumerate() {
        let n = *n as f64;
        let mean = s / n;
        let std = (ss / n - mean * mean).sqrt();
        assert!(mean.abs() < 1e-2, "channel {chan}: mask-interior mean {mean}");
        assert!((std - 1.0).abs() < 1e-2, "channel {chan}: mask-interior std {std}");
    }
}

#[test]
fn prediction_runtime_scales_roughly_linearly() {
    // smoke check only: timings printed, nothing asserted about them
    let mut cfg = ModelConfig::tiny(2);
    cfg.init_sigma = 0.05;
    let net = build_network(&cfg).unwrap();
    let norm = svox_core::sampler::NormalizationSpec {
        mr_mean: [0.3, 0.3],
        mr_std: [0.2, 0.2],
        ct_scale: 0.001,
    };
    let mut last_voxels = 0.0;
    let mut last_secs = 0.0;
    for dims in [[16usize, 16, 8], [32, 32, 16]] {
        let spec = PhantomSpec::default_with([32, 32, 32], 3);
        let pair = generate(&spec).unwrap();
        let crop = |v: &svox_core::volume::Volume| {
            let mut out = svox_core::volume::Volume::zeros(dims);
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        out.data[x + dims[0] * (y + dims[1] * z)] = v.at(x, y, z);
                    }
                }
            }
            out
        };
        let e1 = crop(&pair.echo1);
        let e2 = crop(&pair.echo2);
        let t0 = Instant::now();
        let out = predict_volume(&net, &norm, Orientation::axial(), &e1, &e2).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        assert_eq!(out.dims, dims);
        let voxels = (dims[0] * dims[1] * dims[2]) as f64;
        println!("predict {dims:?}: {:.3}s ({:.1} kvox/s)", secs, voxels / secs / 1e3);
        if last_voxels > 0.0 {
            println!("scale factor {:.1}x voxels -> {:.1}x time", voxels / last_voxels, secs / last_secs);
        }
        last_voxels = voxels;
        last_secs = secs;
    }
}
