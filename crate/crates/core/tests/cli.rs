use std::path::Path;
use std::process::{Command, Output};

use mtlkit::checkpoint::Checkpoint;
use mtlkit::config::RunConfig;
use mtlkit::data::{load_manifest, write_manifest, Dataset, Sample};
use mtlkit::tensor::Tensor;
use mtlkit::train::initial_net;
use serde_json::Value;

fn mtlkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlkit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mtlkit(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

fn log_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(json).collect()
}

#[test]
fn synth_writes_records_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "a", "--samples", "10", "--seed", "4"], p);
    ok(&["synth", "--out", "b", "--samples", "10", "--seed", "4"], p);
    let manifest = std::fs::read_to_string(p.join("a/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 11);
    assert_eq!(std::fs::read_dir(p.join("a/images")).unwrap().count(), 10);
    assert_eq!(manifest, std::fs::read_to_string(p.join("b/manifest.jsonl")).unwrap());
    for entry in std::fs::read_dir(p.join("a/images")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(p.join("a/images").join(&name)).unwrap();
        let b = std::fs::read(p.join("b/images").join(&name)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn correlate_recovers_the_planted_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("spec.json"), r#"{"samples": 2000, "image_size": 8}"#).unwrap();
    ok(&["synth", "--spec", "spec.json", "--out", "d"], p);
    let csv = ok(&["correlate", "--data", "d/manifest.jsonl"], p);
    let plant = mtlkit::data::strong_correlation(6, 5, 0.8);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for (line, want) in rows.iter().zip(&plant) {
        let got: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 0.05, "{line}");
        }
    }
}

#[test]
fn train_eval_ensemble_retrieve_attention_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "d", "--samples", "40", "--seed", "2"], p);
    ok(&["train", "--data", "d/manifest.jsonl", "--out", "run", "--epochs", "2", "--seed", "5"], p);
    for f in ["train_log.jsonl", "final.ckpt", "best.ckpt", "config.json"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let log = log_lines(&p.join("run/train_log.jsonl"));
    assert_eq!(log.len(), 3);
    assert_eq!(log[0]["phase"], "init");
    assert!(log[1]["validation"]["total"].is_number());

    let report = json(&ok(
        &["eval", "--checkpoint", "run/best.ckpt", "--data", "d/manifest.jsonl", "--scores-out", "sc", "--ten-crop"],
        p,
    ));
    assert_eq!(report["samples"], 40);
    let rescored = json(&ok(
        &[
            "eval",
            "--data",
            "d/manifest.jsonl",
            "--lesion-scores",
            "sc/lesion_scores.csv",
            "--location-scores",
            "sc/location_scores.csv",
        ],
        p,
    ));
    assert_eq!(report, rescored);

    let same = json(&ok(
        &["ensemble", "--a", "sc/lesion_scores.csv", "--b", "sc/lesion_scores.csv", "--data", "d/manifest.jsonl"],
        p,
    ));
    assert_eq!(same["lesion"], report["lesion"]);
    assert!(same.get("location").is_none());

    let retrieval = json(&ok(
        &["retrieve", "--checkpoint", "run/best.ckpt", "--data", "d/manifest.jsonl", "--k", "3"],
        p,
    ));
    for q in retrieval["queries"].as_array().unwrap() {
        let first = &q["neighbors"][0];
        assert_eq!(first["distance"], 0.0);
        assert_eq!(first["id"], q["id"]);
    }

    ok(
        &["attention", "--checkpoint", "run/best.ckpt", "--data", "d/manifest.jsonl", "--id", "s0001", "--head", "location", "--out", "att"],
        p,
    );
    let names: Vec<String> = std::fs::read_dir(p.join("att"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 2);
    let sidecar = names.iter().find(|n| n.ends_with(".json")).unwrap();
    let meta = json(&std::fs::read_to_string(p.join("att").join(sidecar)).unwrap());
    let ds = load_manifest(p.join("d/manifest.jsonl")).unwrap();
    assert_eq!(meta["class_index"], ds.samples[1].location - 1);
    let pgm = std::fs::read(p.join("att").join(meta["image"].as_str().unwrap())).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "d", "--samples", "30"], p);
    for run in ["r1", "r2"] {
        ok(&["train", "--data", "d/manifest.jsonl", "--out", run, "--epochs", "2", "--seed", "9"], p);
    }
    for f in ["train_log.jsonl", "final.ckpt", "best.ckpt"] {
        assert_eq!(std::fs::read(p.join("r1").join(f)).unwrap(), std::fs::read(p.join("r2").join(f)).unwrap(), "{f}");
    }
    let cv = |seed: &str| ok(&["cv", "--data", "d/manifest.jsonl", "--epochs", "1", "--folds", "3", "--seed", seed], p);
    let first = json(&cv("1"));
    assert_eq!(first, json(&cv("1")));
    let sizes: usize = first["folds"].as_array().unwrap().iter().map(|f| f["test_size"].as_u64().unwrap() as usize).sum();
    assert_eq!(sizes, 30);
}

#[test]
fn zero_epochs_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "d", "--samples", "12"], p);
    ok(&["train", "--data", "d/manifest.jsonl", "--out", "run", "--epochs", "0", "--seed", "3"], p);
    let ck = Checkpoint::load(p.join("run/final.ckpt")).unwrap();
    let cfg = RunConfig {
        seed: 3,
        ..RunConfig::default()
    };
    let init = initial_net(&cfg, 6, 5).unwrap();
    assert_eq!(ck.net.params().len(), init.params().len());
    for (a, b) in ck.net.params().iter().zip(init.params()) {
        assert_eq!(a.tensor.values(), b.tensor.values(), "{}", a.name);
    }
}

#[test]
fn lesion_only_log_has_no_location_loss() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "d", "--samples", "20"], p);
    ok(&["train", "--data", "d/manifest.jsonl", "--out", "run", "--epochs", "1", "--mode", "lesion-only"], p);
    let text = std::fs::read_to_string(p.join("run/train_log.jsonl")).unwrap();
    assert!(!text.contains("location_loss"));
    assert!(text.contains("lesion_loss"));
}

#[test]
fn training_loss_falls_by_epoch_five() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "d"], p);
    ok(&["train", "--data", "d/manifest.jsonl", "--out", "run", "--epochs", "5", "--seed", "0"], p);
    let log = log_lines(&p.join("run/train_log.jsonl"));
    let total = |e: usize| log[e]["train"]["total"].as_f64().unwrap();
    assert_eq!(log[5]["epoch"], 5);
    assert!(total(5) < total(0), "epoch 5 {} vs epoch 0 {}", total(5), total(0));
}

#[test]
fn tiny_run_memorizes_its_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--out", "d", "--samples", "20", "--seed", "1"], p);
    // no augmentation, full-image views, fixed learning rate
    std::fs::write(
        p.join("cfg.json"),
        r#"{"epochs": 300, "batch_size": 5, "validation_fraction": 0.0,
            "net": {"input_size": 32},
            "optimizer": {"lr": 0.01, "plateau": {"patience": 1000}},
            "augment": {"jitter_min": 32, "jitter_max": 32, "crop": 32, "eval_scale": 32, "flip_prob": 0.0}}"#,
    )
    .unwrap();
    ok(&["train", "--config", "cfg.json", "--data", "d/manifest.jsonl", "--out", "run"], p);
    let report = json(&ok(
        &["eval", "--config", "cfg.json", "--checkpoint", "run/final.ckpt", "--data", "d/manifest.jsonl"],
        p,
    ));
    let map_image = report["lesion"]["map_image"].as_f64().unwrap();
    assert!(map_image > 0.95, "mAP-image {map_image}");
}

#[test]
fn ten_crop_matches_center_crop_on_constant_images() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let samples = (0..6)
        .map(|i| Sample {
            id: format!("c{i}"),
            image: Tensor::filled(&[3, 32, 32], 0.15 * i as f64),
            lesions: (0..3).map(|k| u8::from(k == i % 3)).collect(),
            location: i % 2 + 1,
        })
        .collect();
    let ds = Dataset {
        samples,
        lesion_names: vec!["a".into(), "b".into(), "c".into()],
        location_names: vec!["x".into(), "y".into()],
        folds: None,
    };
    write_manifest(&ds, p.join("d")).unwrap();
    ok(&["train", "--data", "d/manifest.jsonl", "--out", "run", "--epochs", "1", "--batch-size", "3"], p);
    let score = |flag: Option<&str>, out: &str| {
        let mut args = vec!["eval", "--checkpoint", "run/final.ckpt", "--data", "d/manifest.jsonl", "--scores-out", out];
        args.extend(flag);
        ok(&args, p);
        std::fs::read_to_string(p.join(out).join("lesion_scores.csv")).unwrap()
    };
    let parse = |csv: String| -> Vec<f64> {
        csv.lines().skip(1).flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>()).collect()
    };
    let (center, ten) = (parse(score(None, "one")), parse(score(Some("--ten-crop"), "ten")));
    for (a, b) in center.iter().zip(&ten) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn errors_are_single_line_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cases: [(&[&str], &str); 4] = [
        (&["correlate", "--data", "missing.jsonl"], "Io"),
        (&["synth", "--out", "x", "--samples", "0"], "BadSpec"),
        (&["frobnicate"], "Usage"),
        (&["train", "--epochs", "1"], "BadConfig"),
    ];
    for (args, kind) in cases {
        let out = mtlkit(args, p);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
        let v = json(stderr.trim_end());
        assert_eq!(v["error"], kind, "{args:?}: {stderr}");
        assert!(v["message"].is_string());
    }

    ok(&["synth", "--out", "d", "--samples", "8"], p);
    std::fs::write(p.join("other.csv"), "id,q\nzzz,0.5\n").unwrap();
    let out = mtlkit(&["ensemble", "--a", "other.csv", "--b", "other.csv", "--data", "d/manifest.jsonl"], p);
    assert_eq!(json(String::from_utf8(out.stderr).unwrap().trim_end())["error"], "MatrixMismatch");
}
