//! End-to-end tests driving the installed binary the way an operator would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn radar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deviceradar"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn binary");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Generate a small device + background corpus and return the file paths.
fn seed_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let device = dir.join("cam.csv");
    let background = dir.join("bg.csv");
    run_ok(radar().args([
        "generate",
        "device",
        "--device-id",
        "cam",
        "--sizes",
        "202,1742,318",
        "--period-us",
        "4000000",
        "--duration-us",
        "400000000",
        "--seed",
        "7",
        "--out",
        device.to_str().unwrap(),
    ]));
    run_ok(radar().args([
        "generate",
        "background",
        "--rate-pps",
        "40",
        "--hosts",
        "6",
        "--duration-us",
        "400000000",
        "--seed",
        "9",
        "--out",
        background.to_str().unwrap(),
    ]));
    (device, background)
}

#[test]
fn full_pipeline_runs_clean_from_generation_to_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let (device, background) = seed_corpus(dir.path());
    let mixed = dir.path().join("mixed.csv");
    let model = dir.path().join("cam.model.json");
    let rules = dir.path().join("cam.rules");
    let detections = dir.path().join("det.csv");
    let report = dir.path().join("report.csv");

    run_ok(radar().args([
        "mix",
        "--iot",
        device.to_str().unwrap(),
        "--background",
        background.to_str().unwrap(),
        "--mode",
        "nat",
        "--out",
        mixed.to_str().unwrap(),
    ]));
    let train_out = run_ok(radar().args([
        "train",
        "--device-trace",
        device.to_str().unwrap(),
        "--background",
        background.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        model.to_str().unwrap(),
    ]));
    let train_text = String::from_utf8_lossy(&train_out.stdout).into_owned();
    assert!(train_text.contains("device_id:      cam"), "train output:\n{train_text}");
    assert!(train_text.contains("val:"), "train output:\n{train_text}");

    let compile_out = run_ok(radar().args([
        "compile",
        "--model",
        model.to_str().unwrap(),
        "--out",
        rules.to_str().unwrap(),
    ]));
    let compile_text = String::from_utf8_lossy(&compile_out.stdout).into_owned();
    assert!(compile_text.contains("direction table: 2 rules"), "compile output:\n{compile_text}");
    assert!(compile_text.contains("inference table:"), "compile output:\n{compile_text}");

    let sim_out = run_ok(radar().args([
        "simulate",
        "--rules",
        rules.to_str().unwrap(),
        "--trace",
        mixed.to_str().unwrap(),
        "--debug-checks",
        "--out",
        detections.to_str().unwrap(),
    ]));
    let sim_text = String::from_utf8_lossy(&sim_out.stdout).into_owned();
    assert!(sim_text.contains("throughput:"), "simulate output:\n{sim_text}");
    assert!(sim_text.contains("register collisions:"), "simulate output:\n{sim_text}");

    let eval_out = run_ok(radar().args([
        "evaluate",
        "--detections",
        detections.to_str().unwrap(),
        "--trace",
        mixed.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]));
    let eval_text = String::from_utf8_lossy(&eval_out.stdout).into_owned();
    assert!(eval_text.contains("device=cam"), "evaluate output:\n{eval_text}");

    for path in [&mixed, &model, &rules, &detections, &report] {
        assert!(path.exists(), "missing output {}", path.display());
    }
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("device_id,windows,tp,fp,tn,fn,"), "report:\n{report_text}");
    assert!(report_text.lines().any(|l| l.starts_with("cam,")), "report:\n{report_text}");
}

#[test]
fn missing_input_file_exits_2_and_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (_, background) = seed_corpus(dir.path());
    let out = radar()
        .args([
            "train",
            "--device-trace",
            dir.path().join("nope.csv").to_str().unwrap(),
            "--background",
            background.to_str().unwrap(),
            "--out",
            dir.path().join("m.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(stderr.contains("--device-trace"), "stderr: {stderr}");
    assert!(stderr.contains("nope.csv"), "stderr: {stderr}");
}

#[test]
fn same_seed_training_runs_produce_byte_identical_models() {
    let dir = tempfile::tempdir().unwrap();
    let (device, background) = seed_corpus(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        run_ok(radar().args([
            "train",
            "--device-trace",
            device.to_str().unwrap(),
            "--background",
            background.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seed must reproduce the exact model file");
}

#[test]
fn config_file_supplies_values_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let (device, background) = seed_corpus(dir.path());
    let cfg = dir.path().join("radar.cfg");
    std::fs::write(&cfg, "# pipeline settings\ntw-us = 2000000\nseed=3\n").unwrap();

    let from_cfg = dir.path().join("cfg.json");
    run_ok(radar().args([
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--device-trace",
        device.to_str().unwrap(),
        "--background",
        background.to_str().unwrap(),
        "--out",
        from_cfg.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&from_cfg).unwrap();
    assert!(text.contains("\"t_w_us\": 2000000"), "config tw-us ignored:\n{text}");

    let from_flag = dir.path().join("flag.json");
    run_ok(radar().args([
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--device-trace",
        device.to_str().unwrap(),
        "--background",
        background.to_str().unwrap(),
        "--tw-us",
        "1000000",
        "--out",
        from_flag.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&from_flag).unwrap();
    assert!(text.contains("\"t_w_us\": 1000000"), "flag did not override config:\n{text}");
}

#[test]
fn corrupted_model_fails_compile_with_a_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "not a model").unwrap();
    let out = radar()
        .args([
            "compile",
            "--model",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("x.rules").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(stderr.contains("model load"), "stderr: {stderr}");
}

#[test]
fn evaluating_a_device_absent_from_the_trace_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (device, background) = seed_corpus(dir.path());
    let model = dir.path().join("m.json");
    let rules = dir.path().join("m.rules");
    let detections = dir.path().join("d.csv");
    run_ok(radar().args([
        "train",
        "--device-trace",
        device.to_str().unwrap(),
        "--background",
        background.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]));
    run_ok(radar().args([
        "compile",
        "--model",
        model.to_str().unwrap(),
        "--out",
        rules.to_str().unwrap(),
    ]));
    run_ok(radar().args([
        "simulate",
        "--rules",
        rules.to_str().unwrap(),
        "--trace",
        device.to_str().unwrap(),
        "--out",
        detections.to_str().unwrap(),
    ]));
    // The background trace carries no packets labelled "cam", so scoring
    // against it must refuse rather than report a silent all-negative truth.
    let out = radar()
        .args([
            "evaluate",
            "--detections",
            detections.to_str().unwrap(),
            "--trace",
            background.to_str().unwrap(),
            "--device-id",
            "cam",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(stderr.contains("no packets labelled"), "stderr: {stderr}");
}

#[test]
fn vpn_capture_trains_directly_and_scores_well() {
    let dir = tempfile::tempdir().unwrap();
    let (device, background) = seed_corpus(dir.path());
    let mixed = dir.path().join("vmixed.csv");
    let model = dir.path().join("cam.model.json");
    let rules = dir.path().join("cam.rules");
    let detections = dir.path().join("det.csv");
    let report = dir.path().join("report.csv");

    run_ok(radar().args([
        "mix",
        "--iot",
        device.to_str().unwrap(),
        "--background",
        background.to_str().unwrap(),
        "--mode",
        "vpn",
        "--out",
        mixed.to_str().unwrap(),
    ]));

    // VPN rewriting shifts sizes, so training must see the post-middlebox
    // capture: the labelled mixed trace serves as both inputs, narrowed by
    // label on each side.
    let train_out = run_ok(radar().args([
        "train",
        "--device-trace",
        mixed.to_str().unwrap(),
        "--background",
        mixed.to_str().unwrap(),
        "--device-id",
        "cam",
        "--seed",
        "3",
        "--out",
        model.to_str().unwrap(),
    ]));
    let train_err = String::from_utf8_lossy(&train_out.stderr).into_owned();
    assert!(train_err.contains("kept"), "train stderr:\n{train_err}");
    assert!(train_err.contains("dropped"), "train stderr:\n{train_err}");

    run_ok(radar().args([
        "compile",
        "--model",
        model.to_str().unwrap(),
        "--out",
        rules.to_str().unwrap(),
    ]));
    run_ok(radar().args([
        "simulate",
        "--rules",
        rules.to_str().unwrap(),
        "--trace",
        mixed.to_str().unwrap(),
        "--out",
        detections.to_str().unwrap(),
    ]));
    run_ok(radar().args([
        "evaluate",
        "--detections",
        detections.to_str().unwrap(),
        "--trace",
        mixed.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]));

    let report_text = std::fs::read_to_string(&report).unwrap();
    let row = report_text
        .lines()
        .find(|l| l.starts_with("cam,"))
        .unwrap_or_else(|| panic!("no cam row in report:\n{report_text}"));
    let fields: Vec<&str> = row.split(',').collect();
    let precision: f64 = fields[6].parse().unwrap();
    let recall: f64 = fields[7].parse().unwrap();
    assert!(precision >= 0.9, "precision {precision} below 0.9; report row: {row}");
    assert!(recall >= 0.9, "recall {recall} below 0.9; report row: {row}");
}
