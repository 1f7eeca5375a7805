//! CLI-level integration: subcommand exit codes, artifact layout, and the
//! full generate → train → forecast → evaluate pipeline.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nestcast")
}

fn run_ok(args: &[&str]) {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(args: &[&str]) -> i32 {
    Command::new(bin())
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap_or(-1)
}

#[test]
fn build_graph_writes_directory_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("graph");
    run_ok(&[
        "build-graph",
        "--h",
        "4",
        "--w",
        "8",
        "--levels",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    for file in ["graph.json", "mesh_nodes.f32", "edges_l0.u32", "g2m.u32", "m2g.u32", "manifest.json"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "build-graph");
    assert!(manifest["outputs"].as_object().unwrap().len() > 5);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(exit_code(&["build-graph", "--h", "4"]), 2, "missing required flag");
    assert_eq!(exit_code(&["build-graph", "--definitely-not-a-flag", "1"]), 2);
    assert_eq!(exit_code(&["no-such-subcommand"]), 2);
    assert_eq!(exit_code(&["--help"]), 0);
}

#[test]
fn dtype_conversion_is_a_format_error_without_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().to_string();
    run_ok(&["build-graph", "--h", "4", "--w", "8", "--levels", "0", "--out", &p("g")]);
    run_ok(&[
        "gen-data", "--kind", "advect", "--h", "4", "--w", "8", "--steps", "10",
        "--channels", "2", "--seed", "1", "--dtype", "f64le", "--out", &p("d.fld"),
    ]);
    // f64 data, f32 training precision, no conversion flag: exit 3.
    let code = exit_code(&[
        "train", "--graph", &p("g"), "--data", &p("d.fld"), "--epochs", "1",
        "--latent", "8", "--blocks", "1", "--heads", "2", "--gate-hidden", "8",
        "--attn-hidden", "8", "--out", &p("ckpt"),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn full_pipeline_completes_quickly() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().to_string();
    run_ok(&["build-graph", "--h", "8", "--w", "16", "--levels", "1", "--out", &p("graph")]);
    run_ok(&[
        "gen-data", "--kind", "advect", "--h", "8", "--w", "16", "--steps", "60",
        "--channels", "3", "--seed", "11", "--out", &p("data.fld"),
    ]);
    run_ok(&[
        "train", "--graph", &p("graph"), "--data", &p("data.fld"), "--epochs", "2",
        "--lr", "1e-3", "--latent", "8", "--blocks", "1", "--heads", "2",
        "--gate-hidden", "8", "--attn-hidden", "8", "--convert", "--out", &p("ckpt"),
    ]);
    assert!(Path::new(&p("ckpt")).join("params.json").exists());
    assert!(Path::new(&p("ckpt")).join("loss_curve.csv").exists());
    run_ok(&[
        "forecast", "--graph", &p("graph"), "--params", &p("ckpt"), "--init", &p("data.fld"),
        "--init-step", "50", "--steps", "5", "--out", &p("fc.fld"),
    ]);
    run_ok(&[
        "evaluate", "--pred", &p("fc.fld"), "--truth", &p("data.fld"),
        "--metrics", "rmse,csi,sedi", "--out", &p("report.json"),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert!(report["rmse"]["mean"].as_array().unwrap().len() == 3);
    run_ok(&["spectrum", "--field", &p("data.fld"), "--step", "0", "--out", &p("spec.csv")]);
    let csv = std::fs::read_to_string(p("spec.csv")).unwrap();
    assert!(csv.lines().count() == 8 + 1 + 1, "k = 0..=8 plus header");

    assert!(
        start.elapsed().as_secs() < 300,
        "pipeline must finish in minutes, took {:?}",
        start.elapsed()
    );
}

#[test]
fn evaluate_with_climatology_reports_acc() {
    use nestcast::fieldio::{write_field, FieldTensor};
    use nestcast::training::fit_norm;

    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().to_string();
    run_ok(&[
        "gen-data", "--kind", "advect", "--h", "4", "--w", "8", "--steps", "20",
        "--channels", "2", "--seed", "21", "--out", &p("truth.fld"),
    ]);
    // Climatology = per-channel, per-gridpoint long-term mean of the series.
    let loaded = nestcast::fieldio::read_field(dir.path().join("truth.fld").as_path()).unwrap();
    let stats = fit_norm(&loaded.series);
    let first = &loaded.series.steps[0];
    let mut clim = FieldTensor::zeros(first.c, first.h, first.w, first.grid);
    for f in &loaded.series.steps {
        for (acc, v) in clim.data.iter_mut().zip(&f.data) {
            *acc += v / loaded.series.len() as f64;
        }
    }
    let _ = stats;
    write_field(
        dir.path().join("clim.fld").as_path(),
        &clim,
        &loaded.series.channels,
        "f64le",
        serde_json::json!({"generator": "climatology"}),
    )
    .unwrap();

    run_ok(&[
        "evaluate", "--pred", &p("truth.fld"), "--truth", &p("truth.fld"),
        "--clim", &p("clim.fld"), "--metrics", "rmse,acc", "--out", &p("report.json"),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    // Perfect forecast: RMSE 0, ACC 1 per channel.
    for v in report["rmse"]["mean"].as_array().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 0.0);
    }
    for v in report["acc"]["mean"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn tracker_cli_emits_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().to_string();
    run_ok(&[
        "gen-data", "--kind", "vortex", "--h", "60", "--w", "120", "--steps", "8",
        "--start-lat", "16.5", "--start-lon", "-151.5", "--out", &p("vort.fld"),
    ]);
    run_ok(&[
        "track", "--fields", &p("vort.fld"), "--init", "16.5,-151.5",
        "--csv", &p("track.csv"), "--out", &p("track.json"),
    ]);
    let track: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("track.json")).unwrap()).unwrap();
    assert_eq!(track["track"]["fixes"].as_array().unwrap().len(), 8);
    assert_eq!(track["track"]["termination"], "end-of-data");
    let csv = std::fs::read_to_string(p("track.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9, "header + 8 fixes");
}

#[test]
fn ensemble_cli_writes_members_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().to_string();
    run_ok(&["build-graph", "--h", "4", "--w", "8", "--levels", "0", "--out", &p("g")]);
    run_ok(&[
        "gen-data", "--kind", "advect", "--h", "4", "--w", "8", "--steps", "12",
        "--channels", "2", "--seed", "3", "--out", &p("d.fld"),
    ]);
    run_ok(&[
        "train", "--graph", &p("g"), "--data", &p("d.fld"), "--epochs", "1",
        "--latent", "8", "--blocks", "1", "--heads", "2", "--gate-hidden", "8",
        "--attn-hidden", "8", "--convert", "--out", &p("ckpt"),
    ]);
    run_ok(&[
        "ensemble", "--graph", &p("g"), "--params", &p("ckpt"), "--init", &p("d.fld"),
        "--init-step", "0", "--members", "4", "--steps", "2", "--seed", "5",
        "--out", &p("ens"),
    ]);
    for f in ["member_000.fld", "member_003.fld", "mean.fld", "manifest.json"] {
        assert!(Path::new(&p("ens")).join(f).exists(), "missing {f}");
    }
}
