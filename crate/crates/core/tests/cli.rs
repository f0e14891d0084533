use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calibkit::io::{parse_report, parse_trace, read_frame_stream, InitialStateFile, StreamFrame};
use calibkit::simulator::{generate_scene, SceneSpec};

fn calib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calib")).args(args).env("CALIBKIT_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec!["--seed", "5", "simulate", "--out", s(&path)];
    args.extend_from_slice(extra);
    ok(&calib(&args));
    path
}

#[test]
fn simulate_round_trips_through_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let path = simulate(dir.path(), "s.jsonl", &["--frames", "40"]);
    let (header, frames) = read_frame_stream(&path).unwrap();
    let scene = SceneSpec { seed: 5, frame_count: 40, ..SceneSpec::default() }.build().unwrap();
    let expected: Vec<StreamFrame> = generate_scene(&scene).unwrap().map(|f| StreamFrame::from(f.unwrap())).collect();
    assert_eq!(frames, expected);
    assert_eq!(header.t_init, scene.t_init);
    assert_eq!(header.intrinsics, scene.intrinsics);
    assert_eq!(header.model, scene.model);
}

#[test]
fn init_recovers_the_truth_from_noiseless_frames() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("noiseless.json");
    std::fs::write(&config, r#"{"scene": {"pixel_noise_sigma": 0.0, "outlier_count": 0, "dropout_probability": 0.0}}"#)
        .unwrap();
    let stream = simulate(dir.path(), "s.jsonl", &["--frames", "30", "--config", s(&config)]);
    let init = dir.path().join("init.json");
    ok(&calib(&["init", "--stream", s(&stream), "--frames", "10", "--out", s(&init)]));
    let state = InitialStateFile::load(&init).unwrap();
    let (_, frames) = read_frame_stream(&stream).unwrap();
    let truth = frames[0].truth.unwrap();
    for i in 0..6 {
        assert!((state.x[i] - truth[i]).abs() < 1e-6, "component {i}: {} vs {}", state.x[i], truth[i]);
    }
    assert_eq!(state.init.unwrap().frames_used, 10);
}

#[test]
fn init_clamps_the_frame_count_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let stream = simulate(dir.path(), "s.jsonl", &["--frames", "20"]);
    let init = dir.path().join("init.json");
    let out = calib(&["init", "--stream", s(&stream), "--frames", "500", "--out", s(&init)]);
    ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("using all"), "{stderr}");
    assert_eq!(InitialStateFile::load(&init).unwrap().init.unwrap().frames_used, 20);
}

#[test]
fn init_bootstraps_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    let stream = simulate(dir.path(), "s.jsonl", &["--frames", "60"]);
    let text = std::fs::read_to_string(&stream).unwrap();
    let mut lines = text.lines();
    let mut stripped = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        v.as_object_mut().unwrap().remove("labels");
        stripped.push_str(&format!("{v}\n"));
    }
    let unlabeled = dir.path().join("unlabeled.jsonl");
    std::fs::write(&unlabeled, stripped).unwrap();
    let init = dir.path().join("init.json");
    let out = calib(&["init", "--stream", s(&unlabeled), "--frames", "50", "--out", s(&init)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bootstrapping"));
    assert!(InitialStateFile::load(&init).unwrap().init.unwrap().bootstrapped);
}

#[test]
fn calibrate_writes_parseable_reports() {
    let dir = tempfile::tempdir().unwrap();
    let stream = simulate(dir.path(), "s.jsonl", &["--frames", "60"]);
    for filter in ["ekf", "aekf", "pf", "pnp"] {
        let out_dir = dir.path().join(filter);
        ok(&calib(&["calibrate", "--stream", s(&stream), "--filter", filter, "--out-dir", s(&out_dir)]));
        let report = parse_report(&std::fs::read_to_string(out_dir.join("report.csv")).unwrap()).unwrap();
        assert_eq!(report.rows.len(), 60);
        assert!(report.error.is_none());
        assert!(report.rows.iter().all(|r| r.n_mismatched.is_some() && r.dt_mm.is_some()));
        let (trace, err) = parse_trace(&std::fs::read_to_string(out_dir.join("trace.csv")).unwrap()).unwrap();
        assert_eq!(trace.len(), 60);
        assert!(err.is_none());
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["frames"], 60);
        assert_eq!(summary["estimator"], filter);
    }
}

#[test]
fn calibrate_marks_partial_reports_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let stream = simulate(dir.path(), "s.jsonl", &["--frames", "30"]);
    let text = std::fs::read_to_string(&stream).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // Line 12 holds frame 10; give it a joint vector of the wrong length.
    let mut v: serde_json::Value = serde_json::from_str(&lines[11]).unwrap();
    v["q"] = serde_json::json!([0.0, 0.1]);
    lines[11] = v.to_string();
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, lines.join("\n") + "\n").unwrap();

    let out_dir = dir.path().join("run");
    let out = calib(&["calibrate", "--stream", s(&broken), "--out-dir", s(&out_dir)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 12"), "{stderr}");

    let report = parse_report(&std::fs::read_to_string(out_dir.join("report.csv")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 10);
    assert!(report.error.unwrap().contains("line 12"));
    let (_, trace_err) = parse_trace(&std::fs::read_to_string(out_dir.join("trace.csv")).unwrap()).unwrap();
    assert!(trace_err.is_some());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["error"].is_string());
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let stream = simulate(dir.path(), "s.jsonl", &["--frames", "5"]);
    let bad_config = dir.path().join("bad.json");
    std::fs::write(&bad_config, r#"{"filter": {"forget_factor": 1.5}}"#).unwrap();
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"filtre": {}}"#).unwrap();
    let out_dir = dir.path().join("o");
    let init = dir.path().join("i.json");
    let cases: Vec<Vec<&str>> = vec![
        vec!["calibrate", "--stream", "/nonexistent.jsonl", "--out-dir", s(&out_dir)],
        vec!["calibrate", "--stream", s(&stream), "--out-dir", s(&out_dir), "--config", s(&bad_config)],
        vec!["calibrate", "--stream", s(&stream), "--out-dir", s(&out_dir), "--config", s(&unknown)],
        vec!["calibrate", "--stream", s(&stream), "--out-dir", s(&out_dir), "--filter", "ukf"],
        vec!["associate", "--stream", s(&stream), "--frame", "99"],
        vec!["simulate", "--out", s(&out_dir), "--frames", "0"],
        vec!["init", "--stream", s(&stream), "--out", s(&init), "--init-nope"],
    ];
    for args in cases {
        let out = calib(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
}

#[test]
fn bench_reports_split_timings() {
    let dir = tempfile::tempdir().unwrap();
    let stream = simulate(dir.path(), "s.jsonl", &["--frames", "60"]);
    let out = calib(&["bench", "--stream", s(&stream)]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    let total = |name: &str| {
        let r = results.iter().find(|r| r["estimator"] == name).unwrap();
        assert!(r["assoc_time_ms"]["median"].is_number());
        assert!(r["filter_time_ms"]["median"].is_number());
        r["filter_time_ms"]["mean"].as_f64().unwrap()
    };
    assert!(total("pf") > total("ekf"));
}

#[test]
fn associate_explains_a_frame() {
    let dir = tempfile::tempdir().unwrap();
    let stream = simulate(dir.path(), "s.jsonl", &["--frames", "10"]);
    let out = calib(&["associate", "--stream", s(&stream), "--frame", "3", "--no-visibility"]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["frame"], 3);
    assert_eq!(v["predictions"].as_array().unwrap().len(), 12);
    assert!(v["predictions"].as_array().unwrap().iter().all(|p| p["kept"] == true));
    let (_, frames) = read_frame_stream(&stream).unwrap();
    assert_eq!(v["assignments"].as_array().unwrap().len(), frames[3].observations.len());
}
