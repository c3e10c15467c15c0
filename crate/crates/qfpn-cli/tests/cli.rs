//! Black-box tests of the `qfpn` binary: flag handling, exit codes, and the
//! stdin/stdout codec filter.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn qfpn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qfpn"))
}

fn run_with_stdin(args: &[&str], stdin: &[u8]) -> Output {
    let mut child = qfpn()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn qfpn");
    child.stdin.as_mut().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn synth_corpus(dir: &Path, n: usize, seed: u64) {
    let out = qfpn()
        .args([
            "synth",
            "--n",
            &n.to_string(),
            "--resolution",
            "16",
            "--seed",
            &seed.to_string(),
            "--out",
        ])
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_every_verb_and_exits_zero() {
    let out = qfpn().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for verb in ["synth", "train", "eval", "ablate", "diagnose", "rle"] {
        assert!(text.contains(verb), "--help missing {verb}");
    }
    for verb in ["synth", "train", "eval", "ablate", "rle"] {
        let out = qfpn().args([verb, "--help"]).output().unwrap();
        assert!(out.status.success(), "{verb} --help failed");
    }
}

#[test]
fn unknown_flags_are_rejected_with_exit_2() {
    let out = qfpn().args(["synth", "--bogus", "1", "--out", "/tmp/x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_validates_empty_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = qfpn()
        .args(["synth", "--n", "5", "--empty-fraction", "1.5", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_layout_and_rerun_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth_corpus(&a, 12, 3);
    synth_corpus(&b, 12, 3);
    for file in ["train.csv", "depths.csv", "images/synth_00000.pgm"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs across identical synth runs");
    }
}

#[test]
fn train_rejects_conflicting_flags_and_missing_corpus() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(&dir.path().join("data"), 8, 1);

    let out = qfpn()
        .args(["train", "--topology", "fpn", "--merge", "identity", "--data"])
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = qfpn()
        .args(["train", "--data"])
        .arg(dir.path().join("missing"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn classical_train_reports_zero_quantum_parameters() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(&dir.path().join("data"), 12, 2);
    let config = r#"{
        "train": {"stage1_epochs": 1, "stage2_epochs": 0, "batch_size": 4, "folds": 2},
        "model": {"encoder_widths": [4, 8, 12, 16], "resolution": 16}
    }"#;
    std::fs::write(dir.path().join("cfg.json"), config).unwrap();
    let out = qfpn()
        .args(["train", "--merge", "classical", "--config"])
        .arg(dir.path().join("cfg.json"))
        .arg("--data")
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("oof_tgs_map "), "stdout: {stdout}");
    assert!(stdout.contains("best_threshold "));

    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/config.json")).unwrap())
            .unwrap();
    assert_eq!(config["parameters"]["quantum"], 0);
}

#[test]
fn diagnose_circuit_zero_case() {
    let out = qfpn().args(["diagnose", "circuit"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for q in 0..4 {
        assert!(text.contains(&format!("expectation,,{q},,1")), "missing qubit {q}:\n{text}");
    }
    assert!(text.contains("floor,,,,0.0625"));
    // Identical reruns produce identical output.
    let again = qfpn().args(["diagnose", "circuit"]).output().unwrap();
    assert_eq!(out.stdout, again.stdout);

    let bad = qfpn()
        .args(["diagnose", "circuit", "--x", "1,2"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn rle_decode_empty_gives_blank_pgm() {
    let out = run_with_stdin(["rle", "decode", "--height", "2", "--width", "2"].as_ref(), b"");
    assert!(out.status.success());
    assert!(out.stdout.starts_with(b"P5\n2 2\n255\n"));
    let data = &out.stdout[out.stdout.len() - 4..];
    assert_eq!(data, &[0, 0, 0, 0]);
}

#[test]
fn rle_encode_of_decode_canonicalizes() {
    let decoded = run_with_stdin(
        ["rle", "decode", "--height", "4", "--width", "4"].as_ref(),
        b"1 3 9 2",
    );
    assert!(decoded.status.success());
    let encoded = run_with_stdin(["rle", "encode"].as_ref(), &decoded.stdout);
    assert!(encoded.status.success());
    assert_eq!(String::from_utf8_lossy(&encoded.stdout).trim(), "1 3 9 2");
}

#[test]
fn rle_bad_token_exits_2() {
    let out = run_with_stdin(
        ["rle", "decode", "--height", "4", "--width", "4"].as_ref(),
        b"1 oops",
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("token 1"));
}

#[test]
fn kernel_threads_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(&dir.path().join("data"), 12, 6);
    let config = r#"{
        "train": {"stage1_epochs": 1, "stage2_epochs": 0, "batch_size": 4, "folds": 2},
        "model": {"encoder_widths": [4, 8, 12, 16], "resolution": 16}
    }"#;
    std::fs::write(dir.path().join("cfg.json"), config).unwrap();
    for (leg, threads) in [("t1", "1"), ("t2", "3")] {
        let out = qfpn()
            .env("QFPN_THREADS", threads)
            .args(["train", "--config"])
            .arg(dir.path().join("cfg.json"))
            .arg("--data")
            .arg(dir.path().join("data"))
            .arg("--out")
            .arg(dir.path().join(leg))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["oof_report.json", "fold0/log.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("t1").join(file)).unwrap(),
            std::fs::read(dir.path().join("t2").join(file)).unwrap(),
            "{file} differs across QFPN_THREADS settings"
        );
    }

    // The quantum run's logs feed the gradient diagnostics report.
    let out = qfpn()
        .args(["diagnose", "gradients", "--run"])
        .arg(dir.path().join("t1"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("floor,0.0625"), "{text}");
    assert!(text.contains("min_ratio,"));
}

#[test]
fn unet_quantum_prints_skip_gate_note() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(&dir.path().join("data"), 8, 4);
    let config = r#"{
        "train": {"stage1_epochs": 1, "stage2_epochs": 0, "batch_size": 4, "folds": 2},
        "model": {"encoder_widths": [4, 8, 12, 16], "resolution": 16}
    }"#;
    std::fs::write(dir.path().join("cfg.json"), config).unwrap();
    let out = qfpn()
        .args(["train", "--topology", "unet_skip", "--merge", "quantum", "--config"])
        .arg(dir.path().join("cfg.json"))
        .arg("--data")
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skip connections"));
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/config.json")).unwrap())
            .unwrap();
    assert_eq!(config["parameters"]["quantum"], 96);
}
