use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anomaly-vqa"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
[train]
patch_size = 4
embed_dim = 16
depth = 1
heads = 2
d_model = 16
decoder_blocks = 1
decoder_heads = 2
max_len = 8
batch_size = 4
"#;

#[test]
fn unknown_flag_exits_with_usage() {
    let out = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn failures_print_one_coded_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["generate", "--checkpoint", "none.safetensors", "--manifest", "none.json", "--case", "c", "--question", "q"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(lines[0].starts_with("error[CorruptArchive]: "), "{stderr}");
}

#[test]
fn overfit_model_answers_with_the_gold_answer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(
        &["synth", "--out", "data", "--patients", "4", "--image-size", "8", "--templates", "is-normal", "--seed", "3"],
        d,
    );
    ok(
        &[
            "--config", "tiny.toml", "train", "--manifest", "data/manifest.json", "--out", "run", "--no-split", "--lr",
            "0.01", "--epochs", "150", "--patience", "149",
        ],
        d,
    );
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d.join("data/manifest.json")).unwrap()).unwrap();
    for case in manifest["cases"].as_array().unwrap() {
        let qa = &case["qa"][0];
        let answer = ok(
            &[
                "generate",
                "--checkpoint",
                "run/best.safetensors",
                "--manifest",
                "data/manifest.json",
                "--case",
                case["case_id"].as_str().unwrap(),
                "--question",
                qa["question"].as_str().unwrap(),
            ],
            d,
        );
        assert_eq!(answer.trim(), qa["answer"].as_str().unwrap());
    }
}

#[test]
fn ablation_eval_writes_paired_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&["synth", "--out", "data", "--patients", "10", "--image-size", "8"], d);
    ok(
        &[
            "--config", "tiny.toml", "train", "--manifest", "data/manifest.json", "--out", "run", "--epochs", "2",
            "--patience", "1", "--lr", "0.001", "--max-len", "24",
        ],
        d,
    );
    assert!(d.join("run/history.csv").exists());
    assert!(d.join("run/split.json").exists());
    let stdout = ok(
        &[
            "eval", "--checkpoint", "run/best.safetensors", "--manifest", "data/manifest.json", "--out", "eval",
            "--ablation",
        ],
        d,
    );
    for mode in ["with_anomaly", "without_anomaly"] {
        let text = std::fs::read_to_string(d.join(format!("eval/report_{mode}.json"))).unwrap();
        let report: anomaly_vqa::evaluation::EvalReport = serde_json::from_str(&text).unwrap();
        assert!(report.n_samples > 0);
        assert!(report.nli.contains_key("stub"));
    }
    let table2 = std::fs::read_to_string(d.join("eval/table2.md")).unwrap();
    assert!(table2.contains("ACC w/o Ano"));
    assert!(stdout.contains("| concat "));
}

#[test]
fn config_file_flags_are_overridden_by_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("synth.json"), r#"{"synth": {"patients": 3, "image_size": 8, "seed": 2}}"#).unwrap();
    let stdout = ok(&["--config", "synth.json", "synth", "--out", "data", "--patients", "5"], d);
    assert!(stdout.contains("5 cases"), "{stdout}");
}
