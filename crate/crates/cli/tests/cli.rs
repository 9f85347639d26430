use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scanreg::geometry::io::{read_frame, read_labels, read_ply, write_frame};
use scanreg::geometry::DepthFrame;
use scanreg::scene::default_intrinsics;
use serde_json::Value;

fn scanreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scanreg")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn manifest(dir: &Path, command: &str) -> Value {
    let manifests: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".manifest.json"))
        .collect();
    assert_eq!(manifests.len(), 1, "exactly one manifest per run");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{command}.manifest.json"))).unwrap()).unwrap();
    assert_eq!(v["command"], command);
    v
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const NOISY: &str = "[scene]\nnoise_sigma_m = 0.003\ndropout_rate = 0.05\n";

#[test]
fn generate_scene_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene");
    let o = scanreg(&["--out-dir", s(&out), "generate-scene"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let frame = read_frame(&out.join("frame.mdf")).unwrap();
    let (k, labels) = read_labels(&out.join("labels.mdl")).unwrap();
    assert_eq!(k, frame.intrinsics);
    assert_eq!(labels.len(), frame.depth().len());
    assert!(read_ply(&out.join("scanner_model.ply")).unwrap().len() > 1000);
    let gt: Value = serde_json::from_str(&std::fs::read_to_string(out.join("ground_truth.json")).unwrap()).unwrap();
    assert!(gt["camera_to_scanner"].is_object());
    let m = manifest(&out, "generate-scene");
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn generate_scene_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.conf", NOISY);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = scanreg(&["--config", s(&cfg), "--seed", "7", "--out-dir", s(&out), "generate-scene", "--random-pose"]);
        assert!(o.status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["frame.mdf", "labels.mdl", "scanner_model.ply", "patient_model.ply", "ground_truth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn full_dropout_leaves_no_valid_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.conf", "[scene]\ndropout_rate = 1.0\n");
    let out = dir.path().join("o");
    assert!(scanreg(&["--config", s(&cfg), "--out-dir", s(&out), "generate-scene"]).status.success());
    assert_eq!(read_frame(&out.join("frame.mdf")).unwrap().valid_count(), 0);
}

#[test]
fn register_oracle_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.conf", NOISY);
    let scene = dir.path().join("scene");
    let o = scanreg(&["--config", s(&cfg), "--seed", "21", "--out-dir", s(&scene), "generate-scene", "--random-pose"]);
    assert!(o.status.success());
    let out = dir.path().join("reg");
    let o = scanreg(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "register",
        "--frame",
        s(&scene.join("frame.mdf")),
        "--model",
        s(&scene.join("scanner_model.ply")),
        "--ground-truth",
        s(&scene.join("ground_truth.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(r["status"], "accepted");
    assert!(r["translation_error_m"].as_f64().unwrap() <= 0.02);
    assert!(r["elapsed_s"].as_f64().unwrap() <= 4.0);
    let m = manifest(&out, "register");
    assert!(m["timings_s"]["calibration"].as_f64().unwrap() > 0.0);
}

#[test]
fn plane_only_frame_asks_for_a_retry() {
    let dir = tempfile::tempdir().unwrap();
    let frame = dir.path().join("plane.mdf");
    write_frame(&frame, &DepthFrame::filled(default_intrinsics(), 1.5).unwrap()).unwrap();
    let out = dir.path().join("o");
    let o = scanreg(&["--out-dir", s(&out), "register", "--frame", s(&frame)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("segmentation"));
    assert_eq!(manifest(&out, "register")["exit_code"], 2);
}

#[test]
fn unreadable_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.mdf", "garbage");
    let out = dir.path().join("o");
    let o = scanreg(&["--out-dir", s(&out), "register", "--frame", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.mdf"));
    let missing = dir.path().join("nope.conf");
    let o = scanreg(&["--config", s(&missing), "--out-dir", s(&out), "generate-scene"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.conf"));
}

#[test]
fn report_reproduces_the_pilot_table() {
    let dir = tempfile::tempdir().unwrap();
    let chart = dir.path().join("chart.csv");
    let o = scanreg(&[
        "--out-dir",
        s(dir.path()),
        "report",
        "--input",
        s(&data("pilot_sessions.csv")),
        "--baseline",
        s(&data("baseline_sessions.csv")),
        "--chart-out",
        s(&chart),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let sys = &v["system"];
    let mean = |k: &str| sys[k]["mean"].as_f64().unwrap();
    assert!((mean("setup_time_min") - 4.5).abs() <= 0.05);
    assert!((mean("registration_error_cm") - 1.3).abs() <= 0.05);
    assert!((mean("anxiety_change_percent") + 20.2).abs() <= 0.05);
    let text = std::fs::read_to_string(&chart).unwrap();
    assert!(text.starts_with("metric,system_value,baseline_value\n"));
    assert!(text.contains("Anxiety reduction,20.0,0.0\n"), "{text}");
}

#[test]
fn report_names_the_bad_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = std::fs::read_to_string(data("pilot_sessions.csv")).unwrap();
    csv = csv.replacen("\n4.3,1,0.65,4,2,", "\n4.3,1,0.65,9,2,", 1);
    let bad = write(dir.path(), "bad.csv", &csv);
    let o = scanreg(&[
        "--out-dir",
        s(dir.path()),
        "report",
        "--input",
        s(&bad),
        "--baseline",
        s(&data("baseline_sessions.csv")),
        "--chart-out",
        s(&dir.path().join("c.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("record 2") && err.contains("SUS item 1"), "{err}");
}

#[test]
fn simulate_with_no_clients_and_no_time() {
    let dir = tempfile::tempdir().unwrap();
    let o = scanreg(&["--out-dir", s(dir.path()), "simulate", "--clients", "0", "--duration-s", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(!names.iter().any(|n| n.starts_with("client_")));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["frames_sent"], 0);
    assert_eq!(summary["calibrations"], 0);
}

#[test]
fn simulate_short_session() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.conf", NOISY);
    let o = scanreg(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(dir.path()),
        "simulate",
        "--scene",
        s(&cfg),
        "--fps",
        "20",
        "--duration-s",
        "2.5",
        "--clients",
        "2",
        "--calibrate-at",
        "0.2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["frames_sent"], 50);
    assert_eq!(v["frames_received"], 50);
    assert_eq!(v["decode_errors"], 0);
    assert_eq!(v["calibrations"], 1);
    assert!(dir.path().join("client_1.jsonl").exists());
    manifest(dir.path(), "simulate");
}
