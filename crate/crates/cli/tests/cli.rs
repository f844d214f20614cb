use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudolabel"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn ids(list: &Value) -> Vec<String> {
    list.as_array()
        .unwrap()
        .iter()
        .map(|e| e["id"].as_str().unwrap().to_string())
        .collect()
}

fn golden() -> String {
    fixture("golden.json").to_string_lossy().into_owned()
}

#[test]
fn score_matches_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["score", &golden()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = fs::read(dir.path().join("scores.csv")).unwrap();
    assert_eq!(got, fs::read(fixture("golden_scores.csv")).unwrap());
}

#[test]
fn filter_modes_on_golden() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["filter", &golden()])), 0);
    let doc = json(&dir.path().join("filtered.json"));
    assert_eq!(ids(&doc["kept"]), ["c"]);
    let reasons: Vec<&str> = doc["rejected"].as_array().unwrap().iter().map(|r| r["reason"].as_str().unwrap()).collect();
    assert_eq!(reasons, ["class_below"; 4]);

    let loose = ["filter", &golden(), "--filter-mode", "coupled", "--coupled-threshold", "0.7"];
    assert_eq!(code(&run(dir.path(), &loose)), 0);
    assert_eq!(ids(&json(&dir.path().join("filtered.json"))["kept"]), ["c", "d"]);
}

#[test]
fn class_threshold_above_one_keeps_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["filter", &golden(), "--class-threshold", "1.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&dir.path().join("filtered.json"));
    assert!(doc["kept"].as_array().unwrap().is_empty());
    assert_eq!(doc["rejected"].as_array().unwrap().len(), 5);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--seed", "7"]);
    assert_eq!(code(&o), 0);
    let doc = json(&dir.path().join("gradcheck.json"));
    assert_eq!(doc["passed"], Value::Bool(true));
    assert!(doc["max_relative_error"].as_f64().unwrap() <= 1e-5);

    let coarse = run(dir.path(), &["gradcheck", "--step", "0.5", "--tolerance", "1e-9"]);
    assert_eq!(code(&coarse), 2);
}

#[test]
fn usage_and_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["score", "does-not-exist.json"])), 1);
    assert_eq!(code(&run(dir.path(), &["score", &golden(), "--no-such-flag"])), 1);
    assert_eq!(code(&run(dir.path(), &["filter", &golden(), "--filter-mode", "fuzzy"])), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"format_version": 1, "image_id": "x", "height": "two", "width": 2, "num_classes": 1, "class_names": ["a"], "instances": []}"#).unwrap();
    let o = run(dir.path(), &["score", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("height"));

    let future = dir.path().join("future.json");
    fs::write(&future, r#"{"format_version": 99, "image_id": "x", "height": 1, "width": 1, "num_classes": 1, "class_names": ["a"], "instances": []}"#).unwrap();
    assert_eq!(code(&run(dir.path(), &["score", future.to_str().unwrap()])), 1);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn simulate_and_analyze_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert_eq!(code(&run(d, &["simulate", "--seed", "3"])), 0);
        let manifest = d.join("manifest.json");
        assert_eq!(code(&run(d, &["analyze", manifest.to_str().unwrap()])), 0);
    }
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    for expected in ["confusion.csv", "errors.csv", "score_iou.csv", "summary.json", "scene_0000_pred.json", "scene_0000_gt.json"] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
    let summary = json(&a.path().join("summary.json"));
    let errors: u64 = summary["errors"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(errors, summary["predictions"].as_u64().unwrap());
    let ap = summary["mean_ap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));
}

#[test]
fn correction_respects_schedule_end() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["simulate", "--seed", "1"])), 0);
    let pred = dir.path().join("scene_0000_pred.json");
    let gt = dir.path().join("scene_0000_gt.json");
    let args = ["correct", pred.to_str().unwrap(), "--ground-truth", gt.to_str().unwrap(), "--mock-accuracy", "0.99"];

    let end = run(dir.path(), &[&args[..], &["--it-cur", "10", "--it-max", "10"]].concat());
    assert_eq!(code(&end), 0, "{}", String::from_utf8_lossy(&end.stderr));
    let doc = json(&dir.path().join("corrections.json"));
    assert_eq!(doc["fusion_weight"].as_f64(), Some(0.0));
    for e in doc["corrections"].as_array().unwrap() {
        assert_eq!(e["teacher_class"], e["corrected_class"]);
    }

    let start = run(dir.path(), &args);
    assert_eq!(code(&start), 0);
    assert_eq!(json(&dir.path().join("corrections.json"))["fusion_weight"].as_f64(), Some(0.5));
}

#[test]
fn loss_combines_terms_with_lambda() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["simulate", "--seed", "2"])), 0);
    let pred = dir.path().join("scene_0001_pred.json");
    let gt = dir.path().join("scene_0001_gt.json");
    let o = run(
        dir.path(),
        &["loss", pred.to_str().unwrap(), "--ground-truth", gt.to_str().unwrap(), "--pseudo", pred.to_str().unwrap(), "--lambda", "2"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&dir.path().join("loss.json"));
    let sup = doc["supervised"]["total"].as_f64().unwrap();
    let unsup = doc["unsupervised"]["total"].as_f64().unwrap();
    let total = doc["total"].as_f64().unwrap();
    assert!((total - (sup + 2.0 * unsup)).abs() <= 1e-12 * (1.0 + total.abs()));

    assert_eq!(code(&run(dir.path(), &["match", pred.to_str().unwrap(), "--ground-truth", gt.to_str().unwrap()])), 0);
    assert!(dir.path().join("match.json").exists());
}

#[test]
fn train_small_config_twice() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = a.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"format_version": 1, "num_labeled": 2, "num_unlabeled": 4, "num_test": 2, "schedule": {"burn_in_iters": 5, "max_iters": 15}}"#,
    )
    .unwrap();
    for d in [a.path(), b.path()] {
        let o = run(d, &["train", cfg.to_str().unwrap(), "--variant", "no_dicc", "--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["train_log.jsonl", "metrics.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    let log = fs::read_to_string(a.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);
    let metrics = json(&a.path().join("metrics.json"));
    assert_eq!(metrics["variant"], "no_dicc");
    assert_eq!(metrics["config"]["correction_enabled"], Value::Bool(false));

    fs::write(&cfg, r#"{"format_version": 1, "schedule": {"burn_in_iters": "many"}}"#).unwrap();
    let o = run(a.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedule.burn_in_iters"));
}
