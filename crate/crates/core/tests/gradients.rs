//! Finite-difference gradient checks at development scale (a few seeds).
//! The acceptance suite in the `svox` crate reruns the same machinery at
//! its full seed count.

use svox_core::model::{build_network, ModelConfig};
use svox_core::testutil::{
    check_all_primitives, check_network_gradients, grads_f32_vs_f64_max_rel_diff, FD_STEP, FD_TOL,
};

#[test]
fn primitive_gradients_match_central_differences() {
    for seed in 0..6u64 {
        let report = check_all_primitives(seed, FD_STEP, FD_TOL).unwrap();
        assert!(report.checked > 100, "seed {seed}: only {} coords checked", report.checked);
        assert!(report.max_rel_err < FD_TOL, "seed {seed}: {}", report.max_rel_err);
    }
}

#[test]
fn tiny_network_gradients_match_central_differences() {
    let mut cfg = ModelConfig::tiny(40);
    cfg.init_sigma = 0.25;
    let net = build_network(&cfg).unwrap();
    let report = check_network_gradients(&net, (3, 4, 4), 7, FD_STEP, FD_TOL).unwrap();
    assert!(report.checked > 1500, "vacuous run: {} checked", report.checked);
    assert!(
        report.excused_kinks < report.checked / 20,
        "too many kink crossings: {} of {}",
        report.excused_kinks,
        report.checked
    );
}

#[test]
fn f32_training_gradients_track_the_f64_instantiation() {
    let mut cfg = ModelConfig::tiny(41);
    cfg.init_sigma = 0.25;
    let net = build_network(&cfg).unwrap();
    let worst = grads_f32_vs_f64_max_rel_diff(&net, (3, 4, 4), 11);
    assert!(worst < 1e-3, "f32 path diverges from f64 path: {worst}");
}
