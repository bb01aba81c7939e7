//! Command-line behavior: flags, error reporting, and output determinism.

use std::path::Path;
use std::process::{Command, Output};

fn svox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svox")).args(args).output().expect("run svox")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_flag_with_defaults() {
    for (sub, flags) in [
        ("phantom", vec!["--out", "--seed", "--count", "--dims", "--threads"]),
        ("train", vec!["--atlas", "--config", "--epochs", "--batch", "--seed", "--lr", "--out", "--threads"]),
        ("predict", vec!["--models", "--echo1", "--echo2", "--out", "--threads"]),
        ("evaluate", vec!["--ref", "--test", "--mask", "--out", "--threads"]),
    ] {
        let out = svox(&[sub, "--help"]);
        assert!(out.status.success());
        let text = stdout(&out);
        for f in flags {
            assert!(text.contains(f), "{sub} --help missing {f}\n{text}");
        }
    }
    // defaults shown for the ones that have them
    let t = stdout(&svox(&["train", "--help"]));
    for d in ["default: 25", "default: 64", "default: 42", "default: tiny"] {
        assert!(t.contains(d), "train --help missing {d:?}");
    }
}

#[test]
fn phantom_is_deterministic_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let r = svox(&["phantom", "--out", out.to_str().unwrap(), "--seed", "7", "--count", "2", "--dims", "32,32,32"]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    for name in ["echo1.svox", "echo2.svox", "ct.svox", "mask.svox", "class_map.svox", "spec.json"] {
        for pair in ["pair_000", "pair_001"] {
            let fa = std::fs::read(a.join(pair).join(name)).unwrap();
            let fb = std::fs::read(b.join(pair).join(name)).unwrap();
            assert_eq!(fa, fb, "{pair}/{name} differs between identical runs");
        }
    }
    assert!(a.join("manifest.json").exists());
}

#[test]
fn evaluate_identity_prints_inf_and_unit_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let r = svox(&["phantom", "--out", dir.path().join("c").to_str().unwrap(), "--seed", "3", "--count", "2", "--dims", "32,32,32"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let ct = dir.path().join("c/pair_000/ct.svox");
    let mask = dir.path().join("c/pair_000/mask.svox");
    let report = dir.path().join("report.json");
    let out = svox(&[
        "evaluate",
        "--ref",
        ct.to_str().unwrap(),
        "--test",
        ct.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("inf"), "table missing inf PSNR:\n{table}");
    assert!(table.contains("1.0000"), "table missing unit correlation:\n{table}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["psnr_db"], "inf");
    assert_eq!(json["correlation"], 1.0);
    assert!(json["mask_source"].as_str().unwrap().ends_with("mask.svox"));

    // identical reruns produce byte-identical reports
    let report2 = dir.path().join("report2.json");
    let out2 = svox(&[
        "evaluate",
        "--ref",
        ct.to_str().unwrap(),
        "--test",
        ct.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--out",
        report2.to_str().unwrap(),
    ]);
    assert!(out2.status.success());
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&report2).unwrap());
}

#[test]
fn predict_with_missing_model_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = svox(&[
        "predict",
        "--models",
        dir.path().to_str().unwrap(),
        "--echo1",
        "x.svox",
        "--echo2",
        "y.svox",
        "--out",
        dir.path().join("p.svox").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.lines().filter(|l| !l.trim().is_empty()).count() == 1, "one-line error:\n{err}");
    assert!(err.contains("model_axial.svoxnet"), "error must name the missing path: {err}");
}

#[test]
fn unreadable_volume_fails_with_unrecognized_format() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.svox");
    std::fs::write(&bogus, b"garbage bytes here").unwrap();
    let out = svox(&[
        "evaluate",
        "--ref",
        bogus.to_str().unwrap(),
        "--test",
        bogus.to_str().unwrap(),
        "--mask",
        bogus.to_str().unwrap(),
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unrecognized format"));
}

#[test]
fn train_writes_three_tagged_models_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let r = svox(&["phantom", "--out", corpus.to_str().unwrap(), "--seed", "11", "--count", "2", "--dims", "32,32,32"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let atlas = corpus.join("pair_000");

    let run = |out: &Path| {
        let r = svox(&[
            "train",
            "--atlas",
            atlas.to_str().unwrap(),
            "--config",
            "tiny",
            "--epochs",
            "1",
            "--batch",
            "64",
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
    };
    let m1 = dir.path().join("m1");
    let m2 = dir.path().join("m2");
    run(&m1);
    run(&m2);
    for tag in ["axial", "coronal", "sagittal"] {
        let name = format!("model_{tag}.svoxnet");
        let f1 = std::fs::read(m1.join(&name)).unwrap();
        let f2 = std::fs::read(m2.join(&name)).unwrap();
        assert_eq!(f1, f2, "{name} not reproducible");
        // each model records its own orientation tag
        let saved = svox::formats::model::load_model(&m1.join(&name)).unwrap();
        assert_eq!(saved.meta.orientation.as_str(), tag);
    }
    // deleting one file and re-running regenerates it bit-identically
    std::fs::remove_file(m1.join("model_coronal.svoxnet")).unwrap();
    run(&m1);
    assert_eq!(
        std::fs::read(m1.join("model_coronal.svoxnet")).unwrap(),
        std::fs::read(m2.join("model_coronal.svoxnet")).unwrap()
    );
}
