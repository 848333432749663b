//! End-to-end tests of the `nvseg` binary: every subcommand runs against
//! small fixtures, outputs land under --out with a manifest, and reruns are
//! byte-identical.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nvseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_phantom_spec(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("phantom.json");
    fs::write(
        &path,
        r#"{"seed": 7, "extents": [16, 16, 16], "background_fraction": 0.6,
            "shapes": [{"kind": "sphere", "center": [8.0, 8.0, 8.0], "radius": 7.3,
                        "intensity": [0.5, 1.5], "class": 1}]}"#,
    )
    .unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn check_counts_reproduces_published_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvseg(&[
        "voxelize-stats",
        "--check-counts",
        "38.84,262.1",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "85.18%");
}

#[test]
fn voxelize_stats_writes_table_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_phantom_spec(dir.path());
    let outdir = dir.path().join("stats");
    let run = || {
        let out = nvseg(&[
            "voxelize-stats",
            "--phantom",
            spec.to_str().unwrap(),
            "--out",
            outdir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            fs::read(outdir.join("stats.csv")).unwrap(),
            fs::read(outdir.join("stats.json")).unwrap(),
        )
    };
    let (csv1, json1) = run();
    let header = String::from_utf8_lossy(&csv1);
    assert!(header.starts_with(
        "Dataset,Non-zero Ratio (%),Cropped Ratio (%),Nonvoid Voxels (k),Traditional Voxels (k),Embedded Voxel Saving (%)"
    ));
    assert!(outdir.join("manifest.json").exists());
    // Rerun: byte-identical primary outputs.
    let (csv2, json2) = run();
    assert_eq!(csv1, csv2);
    assert_eq!(json1, json2);
}

#[test]
fn empty_volume_directory_fails_with_single_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("vols");
    fs::create_dir(&empty).unwrap();
    let out = nvseg(&[
        "voxelize-stats",
        "--volumes",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn qea_reproduces_hand_computed_area() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("qea.json");
    fs::write(
        &fixture,
        r#"{"axes": [{"name": "dice", "direction": "higher_better"},
                     {"name": "hd95", "direction": "lower_better"},
                     {"name": "flops", "direction": "lower_better"},
                     {"name": "nsd", "direction": "higher_better"}],
            "methods": ["m1", "m2", "m3"],
            "values": [[0.92, 1.25, 260.0, 0.97],
                       [0.90, 1.5, 775.0, 0.96],
                       [0.88, 2.25, 1430.0, 0.94]]}"#,
    )
    .unwrap();
    let outdir = dir.path().join("qea");
    let out = nvseg(&[
        "qea",
        "--input",
        fixture.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // m1 is best on every axis: unit radii, area 1/2 * 4 * sin(pi/2) = 2.
    assert!(stdout(&out).contains("m1 area 2.000000"));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(outdir.join("qea.json")).unwrap()).unwrap();
    assert_eq!(json["axes"][0], "dice");
    assert_eq!(json["methods"][0]["radii"][0], 1.0);
}

#[test]
fn eps_sweep_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_phantom_spec(dir.path());
    let outdir = dir.path().join("eps");
    let out = nvseg(&[
        "eps-sweep",
        "--phantom",
        spec.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let curve: Vec<(f64, f64)> =
        serde_json::from_slice(&fs::read(outdir.join("sweep.json")).unwrap()).unwrap();
    assert!(curve.len() >= 10);
    for w in curve.windows(2) {
        assert!(w[1].1 >= w[0].1);
    }
}

#[test]
fn flops_reports_both_modes_and_their_saving() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_phantom_spec(dir.path());
    let outdir = dir.path().join("flops");
    let out = nvseg(&[
        "flops",
        "--phantom",
        spec.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("nonvoid:") && text.contains("dense-forced:"));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(outdir.join("flops.json")).unwrap()).unwrap();
    let nv = json["nonvoid"]["total_flops"].as_u64().unwrap();
    let dense = json["dense_forced"]["total_flops"].as_u64().unwrap();
    assert!(nv < dense);
    assert!(json["flop_saving_pct"].as_f64().unwrap() > 0.0);
}

#[test]
fn significance_flags_conclusive_and_degenerate_cases() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("sig.json");
    fs::write(
        &fixture,
        r#"{"comparisons": [
            {"name": "improves",
             "a": [0.92, 0.91, 0.93, 0.90, 0.94, 0.92, 0.95, 0.91],
             "b": [0.90, 0.89, 0.915, 0.88, 0.93, 0.915, 0.94, 0.905]},
            {"name": "degenerate",
             "a": [0.9, 0.9, 0.9, 0.9, 0.9],
             "b": [0.9, 0.9, 0.9, 0.9, 0.9]}]}"#,
    )
    .unwrap();
    let outdir = dir.path().join("sig");
    let out = nvseg(&[
        "significance",
        "--input",
        fixture.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("(significant)"));
    assert!(text.contains("inconclusive"));
    // All eight differences are positive: exact two-sided p = 2/256.
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(outdir.join("significance.json")).unwrap()).unwrap();
    let raw = json[0]["raw_p"].as_f64().unwrap();
    assert!((raw - 2.0 / 256.0).abs() < 1e-12);
}

#[test]
fn forward_writes_dense_logits_of_the_right_size() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_phantom_spec(dir.path());
    let outdir = dir.path().join("fwd");
    let out = nvseg(&[
        "forward",
        "--phantom",
        spec.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // 16^3 voxels x 2 classes x 4 bytes.
    let payload = fs::read(outdir.join("logits.raw")).unwrap();
    assert_eq!(payload.len(), 16 * 16 * 16 * 2 * 4);
    let sidecar: serde_json::Value =
        serde_json::from_slice(&fs::read(outdir.join("logits.raw.json")).unwrap()).unwrap();
    assert_eq!(sidecar["shape"], serde_json::json!([16, 16, 16, 2]));
    assert!(outdir.join("metrics.json").exists());
}

#[test]
fn train_toy_writes_trajectory_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_phantom_spec(dir.path());
    let outdir = dir.path().join("train");
    let out = nvseg(&[
        "train-toy",
        "--phantom",
        spec.to_str().unwrap(),
        "--steps",
        "3",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(outdir.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header + 3 steps");
    assert!(outdir.join("weights.raw").exists());
    assert!(outdir.join("weights.raw.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(outdir.join("manifest.json")).unwrap()).unwrap();
    let files: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["file"].as_str().unwrap())
        .collect();
    assert!(files.contains(&"trajectory.csv"));
    assert!(files.contains(&"weights.raw"));
}

#[test]
fn gradcheck_blocks_scope_passes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvseg(&[
        "gradcheck",
        "--scope",
        "blocks",
        "--out",
        dir.path().join("gc").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("PASS"), "{text}");
}
