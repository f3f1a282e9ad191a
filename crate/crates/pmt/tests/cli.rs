//! End-to-end CLI behaviors: dataset round trips, training determinism,
//! evaluation, report merging, and the exit-code contract.

use std::path::Path;
use std::process::Command;

fn pmt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmt"))
}

/// Overrides shrinking everything to a few seconds.
fn tiny_overrides(out: &Path) -> Vec<String> {
    [
        "data.count=14",
        "data.height=16",
        "data.width=16",
        "data.labeled_fraction=0.3",
        "net.base_filters=2",
        "net.depth=1",
        "trainer.total_iters=10",
        "trainer.buffer_len_B=4",
        "seeds=[1]",
    ]
    .iter()
    .flat_map(|o| ["--override".to_string(), o.to_string()])
    .chain(["--out".to_string(), out.display().to_string()])
    .collect()
}

#[test]
fn train_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let status = pmt()
            .arg("train")
            .args(tiny_overrides(&out))
            .status()
            .expect("binary runs");
        assert!(status.success());
    }
    for file in ["history.csv", "report.csv", "report.json"] {
        let a = std::fs::read(dir.path().join("a/train/seed_1").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b/train/seed_1").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn gen_data_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("work");
    let status = pmt()
        .arg("gen-data")
        .args(tiny_overrides(&out))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("dataset/meta.json").is_file());
    assert!(out.join("dataset/sample_00000.segv1").is_file());

    let status = pmt()
        .arg("train")
        .args(tiny_overrides(&out))
        .args(["--data", out.join("dataset").to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = out.join("train/seed_1/checkpoint.ckpt");
    assert!(ckpt.is_file());

    let output = pmt()
        .arg("eval")
        .args(tiny_overrides(&out))
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--data", out.join("dataset").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("evaluated 14 samples"), "stdout: {text}");
    assert!(out.join("eval/report.csv").is_file());
}

#[test]
fn config_error_exits_1_and_names_key() {
    let output = pmt()
        .args(["train", "--override", "trainer.not_a_key=1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("not_a_key"), "stderr: {err}");

    let output = pmt()
        .args(["train", "--override", "data.height=63"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("data.height"), "stderr: {err}");
}

#[test]
fn unknown_flag_exits_1() {
    let output = pmt().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn report_on_empty_dir_exits_0_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results");
    std::fs::create_dir_all(&results).unwrap();
    let output = pmt()
        .args(["report", "--results", results.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let csv = std::fs::read_to_string(results.join("summary.csv")).unwrap();
    assert_eq!(csv, "label,metric,mean,std,n\n");
}

#[test]
fn report_merges_completed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("work");
    let status = pmt().arg("train").args(tiny_overrides(&out)).status().unwrap();
    assert!(status.success());
    let output = pmt()
        .args(["report", "--results"])
        .arg(out.join("train"))
        .arg("--curves")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let summary = std::fs::read_to_string(out.join("train/summary.csv")).unwrap();
    assert!(summary.lines().count() > 1, "summary: {summary}");
    assert!(out.join("train/curves.csv").is_file());
}

#[test]
fn mode_override_switches_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sup");
    let mut args = tiny_overrides(&out);
    args.extend([
        "--override".to_string(),
        "trainer.mode=supervised_baseline".to_string(),
    ]);
    let status = pmt().arg("train").args(&args).status().unwrap();
    assert!(status.success());
    let history = std::fs::read_to_string(out.join("train/seed_1/history.csv")).unwrap();
    // supervised rows carry zero teacher/peer terms
    for line in history.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[7], "0"); // l_aln
        assert_eq!(cols[8], "0"); // l_u
        assert_eq!(cols[9], "0"); // l_t
    }
}
