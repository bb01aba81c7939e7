//! Forward-path oracle equivalence and cross-module properties.

use proptest::prelude::*;
use svox_core::tensor::{maxpool3d, relu, Shape5, Tensor5};
use svox_core::testutil::{
    conv_linearity_residual, conv_vs_naive_max_abs_err, pool_vs_naive_max_abs_err,
};
use svox_core::volume::{inverse_reorient, reorient, IntensityUnits, Orientation, Volume};

#[test]
fn conv_matches_naive_loops_on_random_tensors() {
    for seed in 0..20u64 {
        let err = conv_vs_naive_max_abs_err(seed);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn pool_matches_naive_scan_on_random_tensors() {
    for seed in 0..20u64 {
        let err = pool_vs_naive_max_abs_err(seed);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn conv_is_affine_in_its_input() {
    for seed in 0..20u64 {
        let res = conv_linearity_residual(seed);
        assert!(res < 1e-5, "seed {seed}: {res}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_ops_preserve_finiteness(
        values in proptest::collection::vec(-1e6f32..1e6f32, 60),
    ) {
        let x = Tensor5::from_vec(Shape5::new(1, 2, 2, 3, 5), values).unwrap();
        prop_assert!(relu(&x).values().iter().all(|v| v.is_finite()));
        prop_assert!(maxpool3d(&x).values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reorient_roundtrips_bit_exactly(
        values in proptest::collection::vec(-1e12f32..1e12f32, 24),
        which in 0usize..3,
    ) {
        let v = Volume::new([2, 3, 4], [0.5, 1.5, 2.5], values, IntensityUnits::ArbitraryMr).unwrap();
        let o = [Orientation::axial(), Orientation::coronal(), Orientation::sagittal()][which];
        let back = inverse_reorient(&reorient(&v, o), o);
        prop_assert_eq!(back.data, v.data);
        prop_assert_eq!(back.dims, v.dims);
        prop_assert_eq!(back.spacing_mm, v.spacing_mm);
    }
}
