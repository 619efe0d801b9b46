use std::path::Path;
use std::process::{Command, Output};

fn neufa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neufa"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const MICRO_RUN: &str = r#"{
  "model": {"vocab_size": 5, "d_mel": 4, "embedding_dim": 8, "text_conv_channels": 8, "text_conv_kernel": 3,
            "text_conv_layers": 1, "text_hidden": 4, "speech_conv_channels": 8, "speech_conv_kernel": 3,
            "speech_conv_layers": 1, "speech_hidden": 4, "speech_gru_layers": 1, "attention_dim": 8,
            "decoder_hidden": 4, "decoder_layers": 1, "detector_channels": 2, "detector_kernel": 3},
  "schedule": {"stage1": {"steps": 3, "weights": {"alpha": 0.1, "beta": 1, "gamma": 10, "delta": 10, "epsilon": 1000, "zeta": 0}},
               "stage2": {"steps": 3, "weights": {"alpha": 0.1, "beta": 1, "gamma": 10, "delta": 10, "epsilon": 0, "zeta": 100}},
               "batch_size": 2, "checkpoint_every": 2}
}"#;

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.json"), r#"{"corpus_size": 8, "vocab_size": 5, "d_mel": 4, "max_tokens": 5}"#).unwrap();
    std::fs::write(d.join("run.json"), MICRO_RUN).unwrap();

    let out = neufa(&["gen-data", "--spec", "spec.json", "--out", "train.jsonl", "--holdout", "3", "--holdout-out", "test.jsonl"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(d.join("test.jsonl")).unwrap().lines().count(), 3);

    let out = neufa(&["train", "--config", "run.json", "--corpus", "train.jsonl", "--out", "ckpt"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["stage1.ckpt", "stage2.ckpt", "stage1_step000002.ckpt", "history.jsonl", "config.json"] {
        assert!(d.join("ckpt").join(f).exists(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(d.join("ckpt/history.jsonl")).unwrap().lines().count(), 6);

    let out = neufa(&["align", "--ckpt", "ckpt/stage2.ckpt", "--corpus", "test.jsonl", "--out", "pred"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("pred/alignments.jsonl").exists());

    let out = neufa(&["eval", "--pred", "pred", "--ref", "test.jsonl", "--report", "report.json"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("median"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_utterances"], 3);
}

#[test]
fn resume_finishes_an_interrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.json"), r#"{"corpus_size": 4, "vocab_size": 5, "d_mel": 4, "max_tokens": 4}"#).unwrap();
    std::fs::write(d.join("run.json"), MICRO_RUN).unwrap();
    assert!(neufa(&["gen-data", "--spec", "spec.json", "--out", "c.jsonl"], d).status.success());
    assert!(neufa(&["train", "--config", "run.json", "--corpus", "c.jsonl", "--out", "a"], d).status.success());
    let out = neufa(&["train", "--config", "run.json", "--corpus", "c.jsonl", "--out", "b", "--resume", "a/stage1_step000002.ckpt"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // 1 remaining stage-1 step and 3 stage-2 steps
    assert_eq!(std::fs::read_to_string(d.join("b/history.jsonl")).unwrap().lines().count(), 4);
    assert_eq!(std::fs::read(d.join("a/stage2.ckpt")).unwrap(), std::fs::read(d.join("b/stage2.ckpt")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // validation failures
    assert_eq!(neufa(&["ablate", "--variant", "dropout"], d).status.code(), Some(1));
    assert_eq!(neufa(&["no-such-command"], d).status.code(), Some(1));
    std::fs::write(d.join("bad.json"), r#"{"model": {"text_conv_kernel": 4}}"#).unwrap();
    std::fs::write(d.join("c.jsonl"), "").unwrap();
    assert_eq!(neufa(&["train", "--config", "bad.json", "--corpus", "c.jsonl", "--out", "o"], d).status.code(), Some(1));
    std::fs::write(d.join("broken.jsonl"), "{ nope\n").unwrap();
    assert_eq!(neufa(&["align", "--ckpt", "x.ckpt", "--corpus", "broken.jsonl", "--out", "o"], d).status.code(), Some(2));
    std::fs::write(d.join("x.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(neufa(&["align", "--ckpt", "x.ckpt", "--corpus", "broken.jsonl", "--out", "o"], d).status.code(), Some(1));
    // runtime failure: missing file
    let out = neufa(&["eval", "--pred", "missing", "--ref", "missing.jsonl", "--report", "r.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(neufa(&["--help"], d).status.code(), Some(0));
}
