//! End-to-end checks of the command-line interface: flag parsing, exit
//! codes, artifact layout, and the synth/train/eval/inspect round trip.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agglo-mvc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_blobs_into(dir: &Path, n_per_cluster: usize, seed: u64) {
    let out = run(&[
        "synth",
        "blobs",
        "--n-per-cluster",
        &n_per_cluster.to_string(),
        "--k",
        "3",
        "--views",
        "2",
        "--dims",
        "3",
        "--separation",
        "9.0",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "synth failed: {}", stderr_of(&out));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    // Unknown flag, missing required flag, missing subcommand, bad value.
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["wibble"]).status.code(), Some(1));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_blobs_into(&data, 10, 7);
    let manifest = data.join("manifest.json");
    let out_dir = dir.path().join("run");

    // k below the minimum.
    let out = run(&[
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--mode",
        "ann",
        "--k",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("k"));

    // Unknown mode.
    let out = run(&[
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--mode",
        "fancy",
        "--k",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_files_exit_three() {
    let out = run(&[
        "train",
        "--data",
        "/nonexistent/manifest.json",
        "--mode",
        "ann",
        "--k",
        "3",
        "--out",
        "/tmp/never-written",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_of(&out).contains("manifest.json"));

    let out = run(&["inspect", "--run", "/nonexistent/run-dir"]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&[
        "eval",
        "--pred",
        "/nonexistent/a.csv",
        "--truth",
        "/nonexistent/b.csv",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_round_trip_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_blobs_into(&data, 15, 3);
    let run_dir = dir.path().join("run");

    let out = run(&[
        "train",
        "--data",
        data.join("manifest.json").to_str().unwrap(),
        "--structure",
        data.join("structure.json").to_str().unwrap(),
        "--mode",
        "ann",
        "--k",
        "3",
        "--r",
        "5",
        "--seed",
        "0",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("converged: true"), "stdout: {text}");
    for name in [
        "labels.csv",
        "trace.csv",
        "graph.dot",
        "graph_edges.csv",
        "run_config.json",
        "metrics.json",
    ] {
        assert!(run_dir.join(name).is_file(), "missing artifact {name}");
    }

    let out = run(&["inspect", "--run", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout_of(&out);
    assert!(text.contains("mode: ann"), "stdout: {text}");
    assert!(text.contains("components: 3"), "stdout: {text}");
    assert!(text.contains("converged: true"), "stdout: {text}");

    let out = run(&[
        "eval",
        "--pred",
        run_dir.join("labels.csv").to_str().unwrap(),
        "--truth",
        data.join("labels.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert!(report["nmi"].as_f64().unwrap() > 0.99);
    assert!(report["ri"].as_f64().unwrap() > 0.99);
}

#[test]
fn train_without_structure_uses_flat_tree() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_blobs_into(&data, 12, 5);
    let run_dir = dir.path().join("run");

    let out = run(&[
        "train",
        "--data",
        data.join("manifest.json").to_str().unwrap(),
        "--mode",
        "ann",
        "--k",
        "3",
        "--r",
        "5",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("converged: true"));
}

#[test]
fn iteration_limit_exits_two_but_still_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_blobs_into(&data, 10, 3);
    let run_dir = dir.path().join("run");

    // Forcing k=2 on three well-separated blobs cannot terminate: the
    // schedule oscillates between merging and shattering.
    let out = run(&[
        "train",
        "--data",
        data.join("manifest.json").to_str().unwrap(),
        "--mode",
        "ann",
        "--k",
        "2",
        "--r",
        "4",
        "--max-iters",
        "20",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("converged: false"));
    assert!(run_dir.join("labels.csv").is_file());
    assert!(run_dir.join("trace.csv").is_file());

    let out = run(&["inspect", "--run", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout_of(&out).contains("converged: false"));
}

#[test]
fn annld_defaults_resolve_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_blobs_into(&data, 10, 9);
    let run_dir = dir.path().join("run");

    let out = run(&[
        "train",
        "--data",
        data.join("manifest.json").to_str().unwrap(),
        "--mode",
        "annld",
        "--k",
        "3",
        "--max-iters",
        "30",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(
        matches!(out.status.code(), Some(0) | Some(2)),
        "stderr: {}",
        stderr_of(&out)
    );
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run_config.json")).unwrap())
            .unwrap();
    assert_eq!(config["mode"], "annld");
    assert_eq!(config["lr"].as_f64().unwrap(), 0.1);
    assert_eq!(config["p"].as_f64().unwrap(), 1.05);
    assert_eq!(config["r"].as_u64().unwrap(), 9);
    assert_eq!(config["lambda_max"].as_f64().unwrap(), 1e7);
}

#[test]
fn thread_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_blobs_into(&data, 8, 1);

    let out = bin()
        .args(["eval", "--pred", "x", "--truth", "y"])
        .env("AGGLO_MVC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("AGGLO_MVC_THREADS"));

    let out = bin()
        .args([
            "eval",
            "--pred",
            data.join("labels.csv").to_str().unwrap(),
            "--truth",
            data.join("labels.csv").to_str().unwrap(),
        ])
        .env("AGGLO_MVC_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn eval_writes_optional_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_blobs_into(&data, 8, 2);
    let report_path = dir.path().join("report.json");

    let out = run(&[
        "eval",
        "--pred",
        data.join("labels.csv").to_str().unwrap(),
        "--truth",
        data.join("labels.csv").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(written["nmi"].as_f64().unwrap(), 1.0);
    assert_eq!(written["purity"].as_f64().unwrap(), 1.0);
}

#[test]
fn layered_synth_writes_grouped_structure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "synth",
        "layered",
        "--groups",
        "5,6",
        "--k",
        "6",
        "--n",
        "71",
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));

    let labels = std::fs::read_to_string(data.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 71);

    let structure: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("structure.json")).unwrap())
            .unwrap();
    let nodes = structure["nodes"].as_array().unwrap();
    // 11 leaves, 2 group nodes, 1 root.
    assert_eq!(nodes.len(), 14);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["views"].as_object().unwrap().len(), 11);

    // Bad group lists are usage errors.
    let out = run(&[
        "synth",
        "layered",
        "--groups",
        "5,x",
        "--k",
        "6",
        "--n",
        "71",
        "--out",
        dir.path().join("d2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
