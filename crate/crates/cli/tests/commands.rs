use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tapas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapas"))
        .args(args)
        .current_dir(dir)
        .env_remove("TAPAS_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = tapas(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_fit_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data.json", "--demos", "5", "--seed", "3"]);
    ok(d, &["segment", "--data", "data.json", "--out-dir", "seg"]);
    let cuts = json(&d.join("seg/cuts.json"));
    assert_eq!(cuts["skill_count"], 4);
    let mags = fs::read_to_string(d.join("seg/magnitudes.csv")).unwrap();
    assert!(mags.starts_with("demo,step,lin_mag,ang_mag,combined,cut\n"));

    ok(d, &["select", "--data", "data.json", "--out", "relevance.json"]);
    assert_eq!(json(&d.join("relevance.json"))["skills"].as_array().unwrap().len(), 4);

    ok(d, &["fit", "--data", "data.json", "--out", "task_model.json", "--driver", "time", "--k", "5", "--tau", "0.4"]);
    let model = json(&d.join("task_model.json"));
    let skills = model["skills"].as_array().unwrap();
    assert_eq!(skills.len(), 4);
    for s in skills {
        assert!(!s["selected_frames"].as_array().unwrap().is_empty());
    }
    assert_eq!(model["config"]["pipeline"]["tau"], 0.4);

    ok(d, &["eval", "--model", "task_model.json", "--episodes", "3", "--out-dir", "ev1", "--seed", "9"]);
    ok(d, &["eval", "--model", "task_model.json", "--episodes", "3", "--out-dir", "ev2", "--seed", "9", "--sequential"]);
    let summary = json(&d.join("ev1/summary.json"));
    assert!(summary["success_rate"].as_f64().unwrap() >= 0.0);
    let a = fs::read(d.join("ev1/traces.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("ev2/traces.csv")).unwrap());
    assert!(a.starts_with(b"episode,step,skill,"));

    ok(d, &["predict", "--model", "task_model.json", "--data", "data.json", "--demo", "1", "--out", "predict.csv"]);
    ok(d, &["export-plots", "--data", "data.json", "--model", "task_model.json", "--out-dir", "plots"]);
    assert!(d.join("plots/components.csv").exists());
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "a.json", "--demos", "3", "--seed", "5"]);
    let out = Command::new(env!("CARGO_BIN_EXE_tapas"))
        .args(["synth", "--out", "b.json", "--demos", "3"])
        .current_dir(d)
        .env("TAPAS_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
    ok(d, &["fit", "--data", "a.json", "--out", "m1.json"]);
    ok(d, &["fit", "--data", "a.json", "--out", "m2.json"]);
    assert_eq!(fs::read(d.join("m1.json")).unwrap(), fs::read(d.join("m2.json")).unwrap());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), "seed = 4\n[scenario]\ndemos = 2\n").unwrap();
    ok(d, &["--config", "run.toml", "synth", "--out", "a.json"]);
    let a = json(&d.join("a.json"));
    assert_eq!(a["config"]["seed"], 4);
    assert_eq!(a["demos"].as_array().unwrap().len(), 2);
    ok(d, &["--config", "run.toml", "synth", "--out", "b.json", "--seed", "6", "--demos", "3"]);
    let b = json(&d.join("b.json"));
    assert_eq!(b["config"]["seed"], 6);
    assert_eq!(b["demos"].as_array().unwrap().len(), 3);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = tapas(dir.path(), &["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(tapas(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_dataset_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data.json", "--demos", "2"]);
    let mut v = json(&d.join("data.json"));
    for i in 3..7 {
        let x = v["demos"][1]["poses"][2][i].as_f64().unwrap();
        v["demos"][1]["poses"][2][i] = (x * 1.01).into();
    }
    fs::write(d.join("bad.json"), serde_json::to_string(&v).unwrap()).unwrap();
    let out = tapas(d, &["fit", "--data", "bad.json", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/demos/1/poses/2"));
    assert!(!d.join("m.json").exists());
}
