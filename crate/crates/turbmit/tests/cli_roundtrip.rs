//! End-to-end smoke tests driving the compiled binary: simulate a stack,
//! restore it, evaluate, plot, and stream in anytime mode, checking files,
//! exit codes, and determinism at the process boundary.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;
use turbmit::fixtures::test_scene;
use turbmit::io;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_turbmit"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn turbmit");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn turbmit").status.code().unwrap_or(-1)
}

fn write_clean(path: &Path) {
    io::write_png(path, &test_scene(48)).unwrap();
}

/// Fast restoration settings shared by the smoke tests.
fn fast_flags(cmd: &mut Command) -> &mut Command {
    cmd.args([
        "--d-over-r0",
        "0.5",
        "--corr",
        "-1.0",
        "--kernel-size",
        "3",
        "--epochs-init",
        "6",
        "--epochs-main",
        "8",
        "--learning-rate",
        "1e-3",
        "--image-size",
        "32",
        "32",
        "--seed",
        "3",
    ])
}

#[test]
fn simulate_is_deterministic_and_complete() {
    let dir = tempdir().unwrap();
    let clean = dir.path().join("clean.png");
    write_clean(&clean);

    for out_name in ["a", "b"] {
        run_ok(bin().args([
            "simulate",
            "--clean",
            clean.to_str().unwrap(),
            "--out",
            dir.path().join(out_name).to_str().unwrap(),
            "--d-over-r0",
            "0.5",
            "--corr",
            "-1.0",
            "--kernel-size",
            "3",
            "--frames",
            "3",
            "--seed",
            "11",
            "--image-size",
            "32",
            "32",
        ]));
    }
    for name in ["frame_000.png", "frame_001.png", "frame_002.png", "ground_truth.png"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let sidecar: io::SimulationSidecar =
        io::read_json(&dir.path().join("a").join("sidecar.json")).unwrap();
    assert_eq!(sidecar.n_frames, 3);
    assert_eq!(sidecar.seed, 11);
    assert_eq!(sidecar.d_over_r0, 0.5);
}

#[test]
fn restore_eval_and_plot_produce_artifacts() {
    let dir = tempdir().unwrap();
    let clean = dir.path().join("clean.png");
    write_clean(&clean);
    let frames = dir.path().join("frames");
    run_ok(bin().args([
        "simulate",
        "--clean",
        clean.to_str().unwrap(),
        "--out",
        frames.to_str().unwrap(),
        "--d-over-r0",
        "0.5",
        "--corr",
        "-1.0",
        "--kernel-size",
        "3",
        "--frames",
        "3",
        "--seed",
        "11",
        "--image-size",
        "32",
        "32",
    ]));

    let out = dir.path().join("run");
    run_ok(fast_flags(bin().args([
        "restore",
        "--frames",
        frames.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])));
    for name in
        ["restored.png", "loss_curve.csv", "checkpoint.ckpt", "metrics.json", "run_manifest.json"]
    {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let metrics: serde_json::Value = io::read_json(&out.join("metrics.json")).unwrap();
    assert!(metrics["psnr"].as_f64().unwrap().is_finite());
    assert!(metrics["baseline_psnr"].as_f64().unwrap().is_finite());
    assert_eq!(metrics["preset"], "air");
    let manifest: serde_json::Value = io::read_json(&out.join("run_manifest.json")).unwrap();
    assert_eq!(manifest["config"]["image_size"], serde_json::json!([32, 32]));
    assert!(!manifest["tool_version"].as_str().unwrap().is_empty());
    assert_eq!(manifest["input_digest"].as_str().unwrap().len(), 64);
    let history = io::read_loss_csv(&out.join("loss_curve.csv")).unwrap();
    assert_eq!(history.len(), 6 + 8);

    // Eval against the ground truth: JSON on stdout.
    let eval = run_ok(bin().args([
        "eval",
        "--restored",
        out.join("restored.png").to_str().unwrap(),
        "--truth",
        out.join("restored.png").to_str().unwrap(),
    ]));
    let parsed: serde_json::Value =
        serde_json::from_slice(&eval.stdout).expect("eval prints JSON");
    assert_eq!(parsed["psnr"].as_f64().unwrap(), 100.0, "identical files hit the PSNR cap");
    assert_eq!(parsed["ssim"].as_f64().unwrap(), 1.0);

    // Plot renders the loss curve and, with sidecars available, the error map.
    run_ok(bin().args(["plot", "--run", out.to_str().unwrap()]));
    assert!(out.join("loss_curve.png").exists());
    assert!(out.join("error_map.png").exists(), "sidecar present, map expected");
}

#[test]
fn restore_reruns_are_deterministic() {
    let dir = tempdir().unwrap();
    let clean = dir.path().join("clean.png");
    write_clean(&clean);
    let frames = dir.path().join("frames");
    run_ok(bin().args([
        "simulate",
        "--clean",
        clean.to_str().unwrap(),
        "--out",
        frames.to_str().unwrap(),
        "--d-over-r0",
        "0.5",
        "--corr",
        "-1.0",
        "--kernel-size",
        "3",
        "--frames",
        "2",
        "--seed",
        "4",
        "--image-size",
        "32",
        "32",
    ]));
    let mut outputs = Vec::new();
    for name in ["r1", "r2"] {
        let out = dir.path().join(name);
        run_ok(fast_flags(bin().args([
            "restore",
            "--frames",
            frames.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])));
        outputs.push(std::fs::read(out.join("restored.png")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "rerun with the same seed must be byte-identical");
}

#[test]
fn anytime_streams_and_reports_timing() {
    let dir = tempdir().unwrap();
    let clean = dir.path().join("clean.png");
    write_clean(&clean);
    let frames = dir.path().join("frames");
    run_ok(bin().args([
        "simulate",
        "--clean",
        clean.to_str().unwrap(),
        "--out",
        frames.to_str().unwrap(),
        "--d-over-r0",
        "0.5",
        "--corr",
        "-1.0",
        "--kernel-size",
        "3",
        "--frames",
        "4",
        "--seed",
        "9",
        "--image-size",
        "32",
        "32",
    ]));
    let out = dir.path().join("stream");
    run_ok(fast_flags(bin().args([
        "anytime",
        "--frames",
        frames.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--warm-epochs",
        "2",
        "--frames-used",
        "2",
    ])));
    assert!(out.join("restored_cold.png").exists());
    assert!(out.join("restored_002.png").exists(), "one warm image per streamed frame");
    assert!(out.join("restored_003.png").exists());
    let timing = std::fs::read_to_string(out.join("timing.csv")).unwrap();
    let mut lines = timing.lines();
    assert_eq!(lines.next().unwrap(), "frame,warm_epochs,epochs_to_match,ratio,seconds");
    assert!(timing.lines().count() >= 4, "cold row plus one row per streamed frame");
}

#[test]
fn error_paths_use_documented_exit_codes() {
    let dir = tempdir().unwrap();
    // Unknown flag: usage error.
    assert_eq!(exit_code(bin().args(["restore", "--no-such-flag"])), 2);
    // Invalid setting: usage error.
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(
        exit_code(bin().args([
            "restore",
            "--frames",
            empty.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
            "--kernel-size",
            "4",
        ])),
        2
    );
    // Too few frames: data error.
    assert_eq!(
        exit_code(bin().args([
            "restore",
            "--frames",
            empty.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])),
        3
    );
    // Unreadable clean image: data error.
    assert_eq!(
        exit_code(bin().args([
            "simulate",
            "--clean",
            dir.path().join("missing.png").to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])),
        3
    );
    // Help exits cleanly.
    assert_eq!(exit_code(bin().arg("--help")), 0);
}
