//! End-to-end checks of the command-line surface: exit codes, run-directory
//! artifacts, and the verification subcommands.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dprompt"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dprompt-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let out = bin().args(["train", "--bogus-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(text.to_lowercase().contains("usage"), "{text}");
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracles_pass_and_exit_zero() {
    let out = bin().arg("oracles").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("PASS").count(), 3, "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let out = bin().arg("gradcheck").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"), "{text}");
    assert!(text.contains("max rel err"));
}

#[test]
fn eval_on_missing_run_dir_is_an_io_error() {
    let out = bin()
        .args(["eval", "--run", "/nonexistent/run-dir"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_the_run_directory_and_eval_reads_it() {
    let dir = temp_dir("train");
    // Small but real end-to-end run with implicit pretraining.
    let out = bin()
        .args([
            "train",
            "--seed",
            "0",
            "--epochs",
            "1",
            "--shots",
            "4",
            "--classes",
            "4",
            "--base",
            "3",
            "--novel",
            "1",
            "--per-class",
            "10",
            "--depth",
            "1",
            "--clip-steps",
            "30",
            "--mae-steps",
            "10",
            "--out",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("hm"), "{text}");

    for artifact in [
        "config.snapshot",
        "metrics.csv",
        "report.json",
        "checkpoints/model/manifest.json",
        "checkpoints/model/weights.bin",
        "curves/loss.svg",
        "curves/orthogonality.svg",
        "pretrained/manifest.json",
    ] {
        assert!(dir.join(artifact).exists(), "missing {artifact}");
    }
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,acc_base,acc_novel,hm,mean_cos_sim\n"));
    assert_eq!(csv.lines().count(), 1 + 2); // header + epochs 0..=1
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(report.contains("\"hm\""));

    let eval = bin().args(["eval", "--run"]).arg(&dir).output().unwrap();
    assert_eq!(
        eval.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    assert!(String::from_utf8_lossy(&eval.stdout).contains("hm"));

    let report_cmd = bin().args(["report", "--run"]).arg(&dir).output().unwrap();
    assert_eq!(report_cmd.status.code(), Some(0));
    let rt = String::from_utf8_lossy(&report_cmd.stdout);
    assert!(rt.contains("zero-shot") && rt.contains("final"), "{rt}");

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn crosseval_writes_summary_json() {
    let dir = temp_dir("cross");
    let out = bin()
        .args([
            "crosseval",
            "--seed",
            "0",
            "--epochs",
            "1",
            "--shots",
            "4",
            "--classes",
            "4",
            "--base",
            "3",
            "--novel",
            "1",
            "--per-class",
            "10",
            "--depth",
            "1",
            "--clip-steps",
            "30",
            "--mae-steps",
            "10",
            "--domains",
            "1,2",
            "--out",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("(source)"), "{text}");
    let summary = std::fs::read_to_string(dir.join("crosseval.json")).unwrap();
    assert!(summary.contains("zero_shot"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn pretrain_checkpoint_is_reusable_and_mismatch_is_rejected() {
    let pre_dir = temp_dir("pre");
    let out = bin()
        .args([
            "pretrain",
            "--seed",
            "0",
            "--classes",
            "4",
            "--clip-steps",
            "30",
            "--mae-steps",
            "10",
            "--out",
        ])
        .arg(&pre_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // provenance mismatch: checkpoint is mae-lite, flag asks for random
    let run_dir = temp_dir("pre-run");
    let out = bin()
        .args([
            "train",
            "--seed",
            "0",
            "--epochs",
            "1",
            "--shots",
            "4",
            "--classes",
            "4",
            "--base",
            "3",
            "--novel",
            "1",
            "--per-class",
            "10",
            "--depth",
            "1",
            "--domain-encoder",
            "random",
            "--ckpt",
        ])
        .arg(&pre_dir)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let _ = std::fs::remove_dir_all(&pre_dir);
    let _ = std::fs::remove_dir_all(&run_dir);
}
