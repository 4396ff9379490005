use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use shapelift::body_model::load_model;
use shapelift::datagen::{load_dataset, RecordLayout};
use shapelift_cli::commands::{sig9, Prediction};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shapelift"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn shapelift")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn small_model(dir: &Path) {
    ok(dir, &["make-model", "--seed", "1", "--vertices", "300", "-o", "model.json"]);
}

#[test]
fn make_model_with_23_joints_has_72_pose_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let msg = ok(dir.path(), &["make-model", "--seed", "1", "--joints", "23", "--shape-dims", "10", "-o", "m.json"]);
    let model = load_model(dir.path().join("m.json")).unwrap();
    assert_eq!(model.pose_dim(), 72);
    assert_eq!(model.shape_dim(), 10);
    assert!(msg.contains("72 pose parameters"), "{msg}");
    assert!(msg.contains("sum to 1: ok"), "{msg}");
}

#[test]
fn make_model_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["make-model", "--seed", "3", "-o", "a.json"]);
    ok(dir.path(), &["make-model", "--seed", "3", "-o", "b.json"]);
    ok(dir.path(), &["make-model", "--seed", "4", "-o", "c.json"]);
    assert_eq!(sha(&dir.path().join("a.json")), sha(&dir.path().join("b.json")));
    assert_ne!(sha(&dir.path().join("a.json")), sha(&dir.path().join("c.json")));
}

#[test]
fn invalid_spec_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["make-model", "--joints", "0", "-o", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("validation") && err.contains("joints"), "{err}");
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn missing_and_garbled_inputs_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen", "--model", "nope.json", "-o", "d.bin"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[io]"));

    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = run(dir.path(), &["gen", "--model", "bad.json", "-o", "d.bin"]);
    assert_eq!(out.status.code(), Some(3));

    small_model(dir.path());
    fs::write(dir.path().join("bad.bin"), b"BFD1 truncated").unwrap();
    let out = run(dir.path(), &["fit", "--model", "model.json", "--data", "bad.bin", "-o", "f.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"vertices": 300, "colour": "red"}"#).unwrap();
    let out = run(dir.path(), &["make-model", "--config", "cfg.json", "-o", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn flags_override_config_file_and_sidecar_echoes_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    fs::write(d.join("gen.json"), r#"{"count": 7, "seed": 5, "viewpoints": [0.0, 90.0]}"#).unwrap();
    ok(d, &["gen", "--model", "model.json", "--config", "gen.json", "-o", "a.bin"]);
    ok(d, &["gen", "--model", "model.json", "--config", "gen.json", "--count", "3", "-o", "b.bin"]);
    ok(d, &["gen", "--model", "model.json", "--count", "2", "-o", "c.bin"]);
    let layout = RecordLayout::for_model(&load_model(d.join("model.json")).unwrap());
    assert_eq!(load_dataset(d.join("a.bin"), &layout).unwrap().len(), 7);
    assert_eq!(load_dataset(d.join("b.bin"), &layout).unwrap().len(), 3);
    assert_eq!(load_dataset(d.join("c.bin"), &layout).unwrap().len(), 2);

    let side: serde_json::Value = serde_json::from_slice(&fs::read(d.join("b.bin.config.json")).unwrap()).unwrap();
    assert_eq!(side["count"], 3);
    assert_eq!(side["seed"], 5);
    assert_eq!(side["viewpoints"], serde_json::json!([0.0, 90.0]));
    // Defaults fill the keys the file left out.
    assert_eq!(side["fill"], 0.8);
    let side: serde_json::Value = serde_json::from_slice(&fs::read(d.join("c.bin.config.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 0);
}

#[test]
fn seed_flag_changes_and_fixes_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    for (name, seed) in [("a.bin", "11"), ("b.bin", "11"), ("c.bin", "12")] {
        ok(d, &["gen", "--model", "model.json", "--count", "4", "--seed", seed, "-o", name]);
    }
    assert_eq!(sha(&d.join("a.bin")), sha(&d.join("b.bin")));
    assert_ne!(sha(&d.join("a.bin")), sha(&d.join("c.bin")));
}

fn read_pgm(path: &Path) -> (usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..20]).into_owned();
    let mut parts = text.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    let header = format!("P5\n{w} {w}\n255\n");
    (w, bytes[header.len()..].to_vec())
}

#[test]
fn render_reproduces_noise_free_silhouettes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    ok(d, &["gen", "--model", "model.json", "--count", "5", "--keypoint-sigma", "0", "--dropout", "0", "--seed", "2", "-o", "d.bin"]);
    ok(d, &["render", "--model", "model.json", "--data", "d.bin", "-o", "r"]);
    let model = load_model(d.join("model.json")).unwrap();
    let records = load_dataset(d.join("d.bin"), &RecordLayout::for_model(&model)).unwrap();
    for (i, r) in records.iter().enumerate() {
        let (w, pixels) = read_pgm(&d.join(format!("r/record_{i:05}.pgm")));
        assert_eq!(w, r.silhouette.size);
        let bits: Vec<bool> = pixels.iter().map(|&p| p == 255).collect();
        assert!(pixels.iter().all(|&p| p == 0 || p == 255));
        assert_eq!(bits, r.silhouette.bits, "record {i}");

        let obj = fs::read_to_string(d.join(format!("r/record_{i:05}.obj"))).unwrap();
        let verts: Vec<&str> = obj.lines().filter(|l| l.starts_with("v ")).collect();
        let faces = obj.lines().filter(|l| l.starts_with("f ")).count();
        assert_eq!(verts.len(), model.n_vertices());
        assert_eq!(faces, model.faces().len());
        for tok in verts.iter().flat_map(|l| l.split_whitespace().skip(1)) {
            let digits = tok.trim_start_matches('-').replace('.', "").trim_start_matches('0').len();
            assert!(digits <= 9, "{tok}");
        }
    }
}

#[test]
fn out_of_range_render_index_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    ok(d, &["gen", "--model", "model.json", "--count", "2", "-o", "d.bin"]);
    let out = run(d, &["render", "--model", "model.json", "--data", "d.bin", "--indices", "5", "-o", "r"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn wrong_sized_predictions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    ok(d, &["gen", "--model", "model.json", "--count", "2", "-o", "d.bin"]);
    let preds = vec![Prediction { theta: vec![0.0; 3], beta: vec![0.0; 10] }; 2];
    fs::write(d.join("p.json"), serde_json::to_vec(&preds).unwrap()).unwrap();
    let out = run(d, &["eval", "--model", "model.json", "--data", "d.bin", "--predictions", "p.json", "-o", "e.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_without_anchor_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    ok(d, &["gen", "--model", "model.json", "--count", "1", "-o", "d.bin"]);
    let out = run(d, &["fit", "--model", "model.json", "--data", "d.bin", "--compare", "-o", "f.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sig9_formatting() {
    assert_eq!(sig9(1.0 / 3.0), "0.333333333");
    assert_eq!(sig9(-2.0 / 3.0), "-0.666666667");
    assert_eq!(sig9(123456.789012), "123456.789");
    assert_eq!(sig9(1.23456789012e-5), "0.0000123456789");
    assert_eq!(sig9(1.5), "1.5");
    assert_eq!(sig9(0.0), "0");
    assert_eq!(sig9(-1e9), "-1000000000");
    for x in [0.1234567891234, 98.76543219, -0.000012345678912] {
        let parsed: f64 = sig9(x).parse().unwrap();
        assert!(((parsed - x) / x).abs() < 1e-8, "{x}");
    }
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    fs::write(
        d.join("train.json"),
        r#"{"plan": {"phase1_steps": 20, "phase2_steps": 20, "batch_size": 4}, "shape_steps": 5, "shape_batch": 2}"#,
    )
    .unwrap();
    ok(d, &["gen", "--model", "model.json", "--count", "40", "--seed", "1", "-o", "train.bin"]);
    ok(d, &["gen", "--model", "model.json", "--count", "4", "--seed", "2", "-o", "test.bin"]);
    ok(d, &["train", "--model", "model.json", "--data", "train.bin", "--config", "train.json", "-o", "priors"]);
    let csv = fs::read_to_string(d.join("priors/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 45);
    ok(d, &["predict", "--model", "model.json", "--priors", "priors", "--data", "test.bin", "-o", "pred.json"]);
    let msg = ok(d, &["eval", "--model", "model.json", "--data", "test.bin", "--predictions", "pred.json", "-o", "eval.json"]);
    assert!(msg.contains("over 4 samples"), "{msg}");
    let msg = ok(d, &["fit", "--model", "model.json", "--data", "test.bin", "--anchor", "pred.json", "--compare", "--max-iters", "10", "-o", "fit.json"]);
    assert!(msg.contains("iteration ratio"), "{msg}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("fit.json")).unwrap()).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 4);
    assert_eq!(report["comparison"]["problems"].as_array().unwrap().len(), 4);
}
