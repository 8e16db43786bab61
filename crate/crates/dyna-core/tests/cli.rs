//! End-to-end smoke tests of the `dyna` binary: subcommands, exit codes,
//! output files, and the CSV/JSON report consistency contract.

use std::path::Path;
use std::process::Command;

fn dyna() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dyna"))
}

#[test]
fn selftest_passes() {
    let out = dyna().arg("selftest").output().expect("run selftest");
    assert!(out.status.success(), "stdout:\n{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("ok")).count() >= 10);
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_errors_exit_1() {
    let out = dyna().arg("deploy").arg("--ratio").arg("0.3").output().unwrap();
    assert_eq!(out.status.code(), Some(1), "invalid ratio should be a usage error");

    let out = dyna().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown subcommand should be a usage error");

    let out = dyna().arg("deploy").output().unwrap();
    assert_eq!(out.status.code(), Some(1), "missing checkpoint path is a usage error");
}

#[test]
fn data_errors_exit_2() {
    let out = dyna()
        .args(["eval", "--ckpt", "/nonexistent/m.ckpt", "--target", "A"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // a corrupt checkpoint is a format error
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = dyna()
        .args(["eval", "--ckpt", bad.to_str().unwrap(), "--target", "A"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let out = dyna().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train-source", "deploy", "eval", "selftest"] {
        assert!(text.contains(sub), "help should list {sub}");
    }
}

/// Full pipeline through the binary with a deliberately tiny config, then
/// the report-consistency contract: JSON totals equal the mean of the CSV
/// per-sample rows to 1e-12.
#[test]
fn train_deploy_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "source_epochs": 1,
            "night_epochs": 1,
            "cycles": 1,
            "test_ratio": 0.5,
        })
        .to_string(),
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let run_dir = dir.path().join("run");

    let out = dyna()
        .args(["train-source", "--out", ckpt.to_str().unwrap(), "--seed", "3"])
        .args(["--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());

    let out = dyna()
        .args(["deploy", "--ckpt", ckpt.to_str().unwrap()])
        .args(["--ratio", "0.5", "--target", "B", "--seed", "3"])
        .args(["--out", run_dir.to_str().unwrap()])
        .args(["--config", cfg_path.to_str().unwrap()])
        .args(["--binarize-pseudo", "--encoder-only-loss"])
        .output()
        .unwrap();
    assert!(out.status.success(), "deploy: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.csv", "report.json", "final_model.ckpt", "state.bin"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    check_report_consistency(&run_dir);

    let out = dyna()
        .args(["eval", "--ckpt", run_dir.join("final_model.ckpt").to_str().unwrap()])
        .args(["--target", "B", "--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "eval: {}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("eval prints JSON");
    let dice = parsed["mean_dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));
}

fn check_report_consistency(run_dir: &Path) {
    let csv = std::fs::read_to_string(run_dir.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("day,index,dice_dyna,dice_source_only"));
    let mut dyna_sum = 0.0;
    let mut src_sum = 0.0;
    let mut n = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        dyna_sum += fields[2].parse::<f64>().unwrap();
        src_sum += fields[3].parse::<f64>().unwrap();
        n += 1;
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap())
            .unwrap();
    let overall_dyna = summary["overall_dyna"].as_f64().unwrap();
    let overall_src = summary["overall_source_only"].as_f64().unwrap();
    assert!((overall_dyna - dyna_sum / n as f64).abs() < 1e-12);
    assert!((overall_src - src_sum / n as f64).abs() < 1e-12);
}
