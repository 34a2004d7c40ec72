//! End-to-end exercises of the command-line surface on tiny configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trc"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn trc");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tmp() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("trc-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn fast_oracle_config(dir: &Path) -> PathBuf {
    let p = dir.join("oracle.json");
    std::fs::write(&p, r#"{"restarts": 1, "max_iters": 600}"#).unwrap();
    p
}

#[test]
fn gen_data_writes_header_plus_n_lines() {
    let dir = tmp();
    let out = dir.join("d.jsonl");
    let ocfg = fast_oracle_config(&dir);
    run_ok(bin()
        .args(["gen-data", "--problem", "vdp", "--n", "10", "--seed", "1", "--out"])
        .arg(&out)
        .arg("--oracle-config")
        .arg(&ocfg));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 11, "header plus 10 samples");
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["sample_count"], 10);
    assert_eq!(header["seed"], 1);
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = bin().args(["gen-data", "--bogus-flag", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    // Single-line diagnostic.
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "stderr was: {err}");
}

#[test]
fn missing_file_is_runtime_error() {
    let dir = tmp();
    let out = bin()
        .args(["train", "--data", "/nonexistent/data.jsonl", "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "stderr was: {err}");
}

#[test]
fn unknown_problem_is_runtime_error() {
    let dir = tmp();
    let out = bin()
        .args(["gen-data", "--problem", "pendulum", "--n", "1", "--out"])
        .arg(dir.join("x.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_round_trip_and_inference() {
    let dir = tmp().join("pipeline");
    std::fs::create_dir_all(&dir).unwrap();
    let data = dir.join("train.jsonl");
    let ocfg = fast_oracle_config(&dir);
    run_ok(bin()
        .args(["gen-data", "--problem", "vdp", "--n", "12", "--seed", "3", "--out"])
        .arg(&data)
        .arg("--oracle-config")
        .arg(&ocfg));

    let cfg = dir.join("config.json");
    std::fs::write(
        &cfg,
        r#"{"trc": {"d_z": 16, "d_h": 16, "blocks": 1, "heads": 2, "inner_cycles": 2},
            "train": {"epochs": 1, "batch_size": 8, "seed": 9}}"#,
    )
    .unwrap();
    let model_dir = dir.join("model");
    run_ok(bin()
        .args(["train", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&model_dir));
    assert!(model_dir.join("final.ckpt").exists());
    assert!(model_dir.join("best.ckpt").exists());
    assert!(model_dir.join("training_metrics.csv").exists());

    // Eval runs without error and reports a finite cost ratio.
    let report_dir = dir.join("report");
    run_ok(bin()
        .args(["eval", "--ckpt"])
        .arg(model_dir.join("final.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--report")
        .arg(&report_dir));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    let ratio = report["cost_ratio"].as_f64().unwrap();
    assert!(ratio.is_finite() && ratio > 0.0);
    assert!(report_dir.join("refinement.csv").exists());
    assert!(report_dir.join("latents.csv").exists());
    // refinement.csv has (K+1) * n_samples data rows.
    let refinement = std::fs::read_to_string(report_dir.join("refinement.csv")).unwrap();
    assert_eq!(refinement.lines().count(), 1 + 4 * 12);

    // Inference from the target itself: every per-iteration cost is near
    // zero on the problem's typical scale (hundreds).
    let out = run_ok(bin()
        .args(["infer", "--ckpt"])
        .arg(model_dir.join("final.ckpt"))
        .args(["--x0", "0,0", "--target", "0,0"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut costs = Vec::new();
    for line in stdout.lines() {
        if let Some(rest) = line.strip_prefix("iteration ") {
            let cost: f64 = rest.split("cost ").nth(1).unwrap().parse().unwrap();
            costs.push(cost);
        }
    }
    assert_eq!(costs.len(), 4, "stdout was: {stdout}");
    assert!(costs.iter().all(|&c| c.abs() < 2.0), "costs from target should be ~0: {costs:?}");

    // Latent export alone.
    let latents = dir.join("latents.csv");
    run_ok(bin()
        .args(["export-latents", "--ckpt"])
        .arg(model_dir.join("final.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&latents));
    let text = std::fs::read_to_string(&latents).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample_id,iteration,pc1,pc2,final_cost");
    assert_eq!(text.lines().count(), 1 + 4 * 12);
}

#[test]
fn oracle_subcommand_solves_trivial_instance() {
    let out = run_ok(bin().args(["oracle", "--problem", "vdp", "--x0", "0,0", "--target", "0,0"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cost: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("cost: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(cost.abs() < 1e-9, "oracle cost from target was {cost}");
}

#[test]
fn infer_dimension_mismatch_is_runtime_error() {
    // Build a checkpoint quickly, then feed a wrong-sized x0.
    let dir = tmp().join("dimcheck");
    std::fs::create_dir_all(&dir).unwrap();
    let data = dir.join("d.jsonl");
    let ocfg = fast_oracle_config(&dir);
    run_ok(bin()
        .args(["gen-data", "--problem", "vdp", "--n", "8", "--seed", "5", "--out"])
        .arg(&data)
        .arg("--oracle-config")
        .arg(&ocfg));
    let cfg = dir.join("c.json");
    std::fs::write(
        &cfg,
        r#"{"trc": {"d_z": 16, "d_h": 16, "blocks": 1, "heads": 2}, "train": {"epochs": 1, "batch_size": 8}}"#,
    )
    .unwrap();
    let model_dir = dir.join("m");
    run_ok(bin()
        .args(["train", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&model_dir));
    let out = bin()
        .args(["infer", "--ckpt"])
        .arg(model_dir.join("final.ckpt"))
        .args(["--x0", "1,2,3", "--target", "0,0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("components"), "stderr: {err}");
}

#[test]
fn gen_data_is_byte_deterministic_under_seed() {
    let dir = tmp().join("det");
    std::fs::create_dir_all(&dir).unwrap();
    let ocfg = fast_oracle_config(&dir);
    let (a, b) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    for out in [&a, &b] {
        run_ok(bin()
            .args(["gen-data", "--problem", "vdp", "--n", "6", "--seed", "42", "--out"])
            .arg(out)
            .arg("--oracle-config")
            .arg(&ocfg));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
