use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use transfusion::data::load_volume_dir;
use transfusion::reconstruct::import_nrrd;

fn tfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tfn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_data(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    ok(&["gen-data", "--seed", "7", "--volumes", "2", "--slices", "2", "--out", s(&d)]);
    d
}

fn small_train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--epochs", "1", "--batch-size", "2", "--base-width", "2"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "7", "--volumes", "2", "--slices", "2", "--out", s(d)]);
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 2 * (2 + 2 + 1));
    assert_eq!(ta, tree(&b));
    assert!(dir.path().join("a.manifest.json").is_file());
    let (vol, labels, meta) = load_volume_dir(&a.join("phantom_000")).unwrap();
    assert_eq!((vol.depth, vol.height), (2, 64));
    assert!(labels.is_some() && meta.seed.is_some());
}

#[test]
fn train_then_evaluate_writes_metric_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let ck = dir.path().join("ck");
    small_train(&data, &ck, &[]);
    assert!(ck.join("model.tfn").is_file() && ck.join("train_log.csv").is_file());
    let ev = dir.path().join("eval");
    let out = ok(&["evaluate", "--ckpt", s(&ck), "--data", s(&data), "--out", s(&ev)]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    for col in ["IoU", "DSC", "VOE", "Precision", "Recall"] {
        assert!(header.contains(&col), "{header:?}");
    }
    assert_eq!(csv.lines().count(), 1 + 3);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ck.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["train"]["epochs"], 1);
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));
    assert!(dir.path().join("eval.manifest.json").is_file());
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small_train(&data, &a, &["--seed", "3"]);
    small_train(&data, &b, &["--seed", "3"]);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn reconstruct_two_models_gives_valid_nrrd() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (t, v) = (dir.path().join("t"), dir.path().join("v"));
    small_train(&data, &t, &[]);
    small_train(&data, &v, &["--seed", "1"]);
    let nrrd = dir.path().join("r.nrrd");
    let vol = data.join("phantom_001");
    ok(&[
        "reconstruct", "--volume", s(&vol), "--tumor-ckpt", s(&t), "--vessel-ckpt", s(&v), "--out", s(&nrrd), "--sigma", "0.5",
    ]);
    let back = import_nrrd(&nrrd, 3).unwrap();
    let (source, _, _) = load_volume_dir(&vol).unwrap();
    assert_eq!(back.labels.shape(), &[2, 64, 64]);
    assert_eq!(back.spacing, source.spacing);
    assert!(back.labels.labels().iter().all(|&l| l < 3));
    let manifest = fs::read_to_string(dir.path().join("r.nrrd.manifest.json")).unwrap();
    assert!(manifest.contains("provenance"));
}

#[test]
fn segment_quantize_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let ck = dir.path().join("ck");
    small_train(&data, &ck, &[]);
    let seg = dir.path().join("seg");
    ok(&["segment", "--ckpt", s(&ck), "--volume", s(&data.join("phantom_000")), "--out", s(&seg)]);
    for name in ["seg_0000.png", "edge_0001.png", "canny_0000.png"] {
        assert!(seg.join(name).is_file(), "{name}");
    }
    let q = dir.path().join("q");
    ok(&["quantize", "--ckpt", s(&ck), "--data", s(&data), "--out", s(&q)]);
    let cmp = dir.path().join("cmp");
    let out = ok(&["compare", "--a", s(&ck), "--b", s(&q), "--data", s(&data), "--out", s(&cmp)]);
    assert!(cmp.join("comparison.csv").is_file());
    assert!(!out.stdout.is_empty());
    ok(&["evaluate", "--ckpt", s(&q), "--data", s(&data), "--out", s(&dir.path().join("qe"))]);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tfn(&["bogus"]).status.code(), Some(1));
    assert_eq!(tfn(&["train", "--nope", "1"]).status.code(), Some(1));
    let out = tfn(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(tfn(&["--help"]).status.code(), Some(0));

    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train.epochz": 3}"#).unwrap();
    let out = tfn(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochz"));

    assert_eq!(tfn(&["evaluate", "--ckpt", "nowhere", "--data", "nowhere", "--out", s(dir.path())]).status.code(), Some(1));

    let data = small_data(dir.path());
    let bad = dir.path().join("bad.tfn");
    fs::write(&bad, b"TFNCKPT\0\x01\0\0\0\xff\xff\0\0\0\0\0\0").unwrap();
    let out = tfn(&["evaluate", "--ckpt", s(&bad), "--data", s(&data), "--out", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"phantom.n_slices": 3, "data.volumes": 1, "phantom.seed": 5}"#).unwrap();
    let d = dir.path().join("d");
    ok(&["gen-data", "--config", s(&cfg), "--slices", "1", "--out", s(&d)]);
    let (vol, _, _) = load_volume_dir(&d.join("phantom_000")).unwrap();
    assert_eq!(vol.depth, 1);
    assert!(!d.join("phantom_001").exists());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("d.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["phantom"]["n_slices"], 1);
}
