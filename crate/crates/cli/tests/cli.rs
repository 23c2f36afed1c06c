//! End-to-end command tests on tiny configurations: file plumbing, exit
//! codes, determinism, and sidecar emission.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mssrnet"))
}

fn tiny_config(dir: &Path, iterations: usize) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "model": {
            "d_model": 16, "d_style": 16, "d_ff": 32, "encoder_layers": 1,
            "decoder_layers": 1, "heads": 2, "max_len": 16, "decode_margin": 4,
            "dropout": 0.1, "fixed_style_vector": false
        },
        "teacher": {
            "layers": 2, "d_model": 16, "d_ff": 32, "heads": 2, "dropout": 0.0,
            "max_steps": 300, "batch_size": 16, "lr": 0.001, "eval_every": 50,
            "early_stop_acc": 0.998
        },
        "schedule": {
            "iterations": iterations, "n_rc": 5, "n_dr": 1, "n_adr": 5,
            "batch_size": 8, "seed": 5, "noise_p": 0.1, "checkpoint_every": 0,
            "validate_every": 0, "validation_slice": 16
        },
        "seed": 5
    });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_synthetic_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let status = bin()
            .args(["gen-synthetic", "--styles", "2", "--per-style", "50", "--seed", "7"])
            .arg("--out-dir")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for style in 0..2 {
        let f1 = std::fs::read_to_string(out1.join(format!("style{style}.txt"))).unwrap();
        let f2 = std::fs::read_to_string(out2.join(format!("style{style}.txt"))).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.lines().count(), 50);
    }
    assert!(out1.join("corpus.config.json").exists());
}

#[test]
fn gen_synthetic_four_styles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("four");
    let status = bin()
        .args(["gen-synthetic", "--styles", "4", "--per-style", "10", "--seed", "3"])
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for style in 0..4 {
        assert!(out.join(format!("style{style}.txt")).exists());
    }
}

#[test]
fn pipeline_runs_end_to_end_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(bin()
        .args(["gen-synthetic", "--styles", "2", "--per-style", "80", "--seed", "9", "--emit-refs"])
        .arg("--out-dir")
        .arg(&data)
        .status()
        .unwrap()
        .success());

    let config = tiny_config(dir.path(), 3);
    let teacher = dir.path().join("teacher.ckpt");
    assert!(bin()
        .args(["teacher-train", "--styles", "2"])
        .arg("--config")
        .arg(&config)
        .arg("--corpus-dir")
        .arg(&data)
        .arg("--out")
        .arg(&teacher)
        .status()
        .unwrap()
        .success());
    assert!(teacher.exists());
    assert!(dir.path().join("teacher.ckpt.config.json").exists());

    let run = dir.path().join("run");
    assert!(bin()
        .args(["train", "--styles", "2"])
        .arg("--config")
        .arg(&config)
        .arg("--corpus-dir")
        .arg(&data)
        .arg("--teacher")
        .arg(&teacher)
        .arg("--out-dir")
        .arg(&run)
        .status()
        .unwrap()
        .success());
    let model = run.join("model.ckpt");
    assert!(model.exists());
    assert!(run.join("metrics.jsonl").exists());

    // transfer: line counts match, deterministic, bad style rejected
    let input = dir.path().join("in.txt");
    let src: String = std::fs::read_to_string(data.join("style1.txt"))
        .unwrap()
        .lines()
        .take(5)
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&input, &src).unwrap();
    let out1 = dir.path().join("out1.txt");
    let out2 = dir.path().join("out2.txt");
    for out in [&out1, &out2] {
        assert!(bin()
            .args(["transfer", "--target-style", "0"])
            .arg("--model")
            .arg(&model)
            .arg("--input")
            .arg(&input)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap()
            .success());
    }
    let t1 = std::fs::read_to_string(&out1).unwrap();
    let t2 = std::fs::read_to_string(&out2).unwrap();
    assert_eq!(t1, t2, "transfer must be deterministic");
    assert_eq!(t1.lines().count(), 5);

    let bad = bin()
        .args(["transfer", "--target-style", "9"])
        .arg("--model")
        .arg(&model)
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(dir.path().join("nope.txt"))
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(1), "unknown style id is a usage error");

    // evaluate: report JSON with stable schema; r-BLEU omitted without refs
    let report = dir.path().join("report.json");
    assert!(bin()
        .args(["evaluate", "--source-style", "1", "--target-style", "0"])
        .arg("--outputs")
        .arg(&out1)
        .arg("--source")
        .arg(&input)
        .arg("--classifier")
        .arg(&teacher)
        .arg("--lm-corpus")
        .arg(data.join("style0.txt"))
        .arg("--report")
        .arg(&report)
        .status()
        .unwrap()
        .success());
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["accuracy", "perplexity", "bleu", "per_style"] {
        assert!(parsed.get(key).is_some(), "missing report key {key}");
    }
    assert!(parsed.get("r_bleu").is_none(), "r_bleu must be omitted without refs");

    // with refs present, r-BLEU appears
    let refs = dir.path().join("refs.txt");
    let gold: String = std::fs::read_to_string(data.join("refs-1to0.txt"))
        .unwrap()
        .lines()
        .take(5)
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&refs, gold).unwrap();
    let report2 = dir.path().join("report2.json");
    assert!(bin()
        .args(["evaluate", "--source-style", "1", "--target-style", "0"])
        .arg("--outputs")
        .arg(&out1)
        .arg("--source")
        .arg(&input)
        .arg("--classifier")
        .arg(&teacher)
        .arg("--lm-corpus")
        .arg(data.join("style0.txt"))
        .arg("--refs")
        .arg(&refs)
        .arg("--report")
        .arg(&report2)
        .status()
        .unwrap()
        .success());
    let parsed2: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report2).unwrap()).unwrap();
    assert!(parsed2.get("r_bleu").is_some());

    // representation dump alongside evaluation
    let reps = dir.path().join("reps.tsv");
    assert!(bin()
        .args(["evaluate", "--source-style", "1", "--target-style", "0"])
        .arg("--outputs")
        .arg(&out1)
        .arg("--source")
        .arg(&input)
        .arg("--classifier")
        .arg(&teacher)
        .arg("--lm-corpus")
        .arg(data.join("style0.txt"))
        .arg("--teacher")
        .arg(&teacher)
        .arg("--model")
        .arg(&model)
        .arg("--dump-representations")
        .arg(&reps)
        .arg("--ratio-csv")
        .arg(dir.path().join("ratios.csv"))
        .arg("--report")
        .arg(dir.path().join("report3.json"))
        .status()
        .unwrap()
        .success());
    let reps_text = std::fs::read_to_string(&reps).unwrap();
    assert!(reps_text.lines().count() > 0);
    assert!(reps_text.lines().all(|l| l.split('\t').count() == 4));
    assert!(dir.path().join("ratios.csv").exists());

    // explain: JSONL records with span fields, beta override honored
    let explain_out = dir.path().join("salience.jsonl");
    assert!(bin()
        .args(["explain", "--label", "1", "--beta", "0.2"])
        .arg("--teacher")
        .arg(&teacher)
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(&explain_out)
        .status()
        .unwrap()
        .success());
    let lines: Vec<String> = std::fs::read_to_string(&explain_out)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 5);
    for line in &lines {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["sentence", "label", "spans", "low_confidence", "original_prob"] {
            assert!(rec.get(key).is_some(), "missing explain key {key}");
        }
    }
}

#[test]
fn malformed_inputs_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    // evaluate with mismatched line counts
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    std::fs::write(&a, "one line\n").unwrap();
    std::fs::write(&b, "one line\nsecond line\n").unwrap();
    // teacher checkpoint is garbage -> data error
    let fake = dir.path().join("fake.ckpt");
    std::fs::write(&fake, "junk").unwrap();
    let status = bin()
        .args(["evaluate", "--source-style", "0", "--target-style", "1"])
        .arg("--outputs")
        .arg(&a)
        .arg("--source")
        .arg(&b)
        .arg("--classifier")
        .arg(&fake)
        .arg("--lm-corpus")
        .arg(&a)
        .arg("--report")
        .arg(dir.path().join("r.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // missing subcommand arguments -> usage error
    let usage = bin().args(["transfer"]).status().unwrap();
    assert_eq!(usage.code(), Some(1));
}

#[test]
fn teacher_train_rejects_single_style() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("corpus.tsv");
    std::fs::write(&tsv, "0\tthe food was good\n0\tthe staff was great\n").unwrap();
    let config = tiny_config(dir.path(), 1);
    let status = bin()
        .args(["teacher-train"])
        .arg("--config")
        .arg(&config)
        .arg("--tsv")
        .arg(&tsv)
        .arg("--out")
        .arg(dir.path().join("t.ckpt"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn config_with_unknown_keys_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"seed": 1, "no_such_section": {}}"#).unwrap();
    let data = dir.path().join("data");
    assert!(bin()
        .args(["gen-synthetic", "--styles", "2", "--per-style", "5", "--seed", "1"])
        .arg("--out-dir")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let status = bin()
        .args(["teacher-train", "--styles", "2"])
        .arg("--config")
        .arg(&config)
        .arg("--corpus-dir")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("t.ckpt"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1), "unknown config keys are a usage error");
}

#[test]
fn resume_restores_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(bin()
        .args(["gen-synthetic", "--styles", "2", "--per-style", "60", "--seed", "4"])
        .arg("--out-dir")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let teacher = dir.path().join("teacher.ckpt");
    let config4 = dir.path().join("c4.json");
    let base: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tiny_config(dir.path(), 4)).unwrap()).unwrap();
    let mut with_ckpt = base.clone();
    with_ckpt["schedule"]["checkpoint_every"] = serde_json::json!(2);
    std::fs::write(&config4, serde_json::to_string(&with_ckpt).unwrap()).unwrap();
    assert!(bin()
        .args(["teacher-train", "--styles", "2"])
        .arg("--config")
        .arg(&config4)
        .arg("--corpus-dir")
        .arg(&data)
        .arg("--out")
        .arg(&teacher)
        .status()
        .unwrap()
        .success());

    // full 4-iteration run
    let run_full = dir.path().join("full");
    assert!(bin()
        .args(["train", "--styles", "2"])
        .arg("--config")
        .arg(&config4)
        .arg("--corpus-dir")
        .arg(&data)
        .arg("--teacher")
        .arg(&teacher)
        .arg("--out-dir")
        .arg(&run_full)
        .status()
        .unwrap()
        .success());

    // 2-iteration run, then resume from step-2 for the remaining 2
    let mut two = base.clone();
    two["schedule"]["iterations"] = serde_json::json!(2);
    two["schedule"]["checkpoint_every"] = serde_json::json!(2);
    let config2 = dir.path().join("c2.json");
    std::fs::write(&config2, serde_json::to_string(&two).unwrap()).unwrap();
    let run_half = dir.path().join("half");
    assert!(bin()
        .args(["train", "--styles", "2"])
        .arg("--config")
        .arg(&config2)
        .arg("--corpus-dir")
        .arg(&data)
        .arg("--teacher")
        .arg(&teacher)
        .arg("--out-dir")
        .arg(&run_half)
        .status()
        .unwrap()
        .success());
    let run_resumed = dir.path().join("resumed");
    assert!(bin()
        .args(["train", "--styles", "2", "--max-iterations", "4"])
        .arg("--config")
        .arg(&config4)
        .arg("--corpus-dir")
        .arg(&data)
        .arg("--teacher")
        .arg(&teacher)
        .arg("--out-dir")
        .arg(&run_resumed)
        .arg("--resume")
        .arg(run_half.join("step-2.ckpt"))
        .status()
        .unwrap()
        .success());

    let full_bytes = std::fs::read(run_full.join("step-4.ckpt")).unwrap();
    let resumed_bytes = std::fs::read(run_resumed.join("step-4.ckpt")).unwrap();
    assert_eq!(full_bytes, resumed_bytes, "resume must replay bit-exactly");
}
