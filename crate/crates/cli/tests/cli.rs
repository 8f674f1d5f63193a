use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn storyagent(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storyagent"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

/// The single JSON summary line of a command.
fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(lines[0]).expect("summary is JSON")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "data_dir": dir.join("data"),
        "base_checkpoint": dir.join("base.lrbe"),
        "model": { "frames": 4, "d_model": 16, "n_blocks": 2, "n_heads": 2 },
        "pretrain": { "steps": 20 },
        "train": { "epochs": 2 },
        "run": { "shots": 2, "sample_steps": 3 },
        "eval": { "shots": 2, "sample_steps": 3 }
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(storyagent(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(storyagent(dir.path(), &["finetune"]).status.code(), Some(1));
    assert_eq!(storyagent(dir.path(), &["--seed", "x", "gradcheck"]).status.code(), Some(1));
    let help = storyagent(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("pipeline"));
}

#[test]
fn unknown_config_key_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"run": {"observer": {"kind": "threshold", "metric": "mask_iou", "tau": 0.5, "tua": 1}}}"#).unwrap();
    let out = storyagent(dir.path(), &["--config", path.to_str().unwrap(), "gradcheck"]);
    assert_eq!(out.status.code(), Some(1));
    let s = summary(&out);
    assert_eq!(s["ok"], false);
    assert!(s["error"].as_str().unwrap().contains("'run.observer"), "{s}");
}

#[test]
fn gradcheck_on_the_shipped_tiny_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json");
    let out = storyagent(dir.path(), &["--config", cfg.to_str().unwrap(), "gradcheck", "--subsample", "25"]);
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!(s["checked"], 25);
    assert!(s["max_rel_error"].as_f64().unwrap() <= 1e-4, "{s}");
}

#[test]
fn batch_workflow_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg.as_str()];
        all.extend_from_slice(args);
        let out = storyagent(d, &all);
        let s = summary(&out);
        (out.status.code(), s)
    };

    let (code, pre) = run(&["pretrain", "--out", "base.lrbe"]);
    assert_eq!(code, Some(0), "{pre}");
    assert_eq!(pre["steps"], 20);

    let (code, added) = run(&["subject", "add", "--id", "kitty", "--family", "8", "--clips", "2"]);
    assert_eq!(code, Some(0), "{added}");
    assert_eq!(added["subject"]["clips"].as_array().unwrap().len(), 2);
    let (code, dup) = run(&["subject", "add", "--id", "kitty", "--family", "8"]);
    assert_eq!(code, Some(2));
    assert!(dup["error"].as_str().unwrap().contains("already exists"));

    let (code, _) = run(&["eval", "--subject", "kitty"]);
    assert_eq!(code, Some(1), "eval needs a customization");

    let (code, tuned) = run(&["finetune", "--subject", "kitty"]);
    assert_eq!(code, Some(0), "{tuned}");
    assert_eq!(tuned["epochs"], 2);
    let (_, listed) = run(&["subject", "list"]);
    assert_eq!(listed["subjects"][0]["customization"], tuned["customization"]);

    let (code, board) = run(&["--seed", "3", "storyboard", "--subject", "kitty", "--prompt", "a day out", "--out", "sb"]);
    assert_eq!(code, Some(0), "{board}");
    assert_eq!(board["shots"], 2);
    assert!(d.join("sb/storyboard.json").exists());
    let (code, anim) = run(&["--seed", "3", "animate", "--subject", "kitty", "--board", "sb", "--out", "an"]);
    assert_eq!(code, Some(0), "{anim}");
    assert_eq!(anim["trained"], true);
    assert!(anim["metrics"]["subject_fidelity"].is_number());
    let (_, anim2) = run(&["--seed", "3", "animate", "--subject", "kitty", "--board", "sb", "--out", "an2"]);
    assert_eq!(anim["files"], anim2["files"]);

    let (code, a) = run(&["--seed", "7", "pipeline", "run", "--prompt", "a day out", "--subject", "kitty"]);
    assert_eq!(code, Some(0), "{a}");
    let (_, b) = run(&["--seed", "7", "pipeline", "run", "--prompt", "a day out", "--subject", "kitty"]);
    assert_eq!(a["phase"], "Done");
    assert_eq!(a["agents"], "DRBRAR");
    assert_ne!(a["run_id"], b["run_id"]);
    assert_eq!(a["artifacts"], b["artifacts"]);
    assert!(a["artifacts"].as_object().unwrap().contains_key("metrics.json"));
    let (_, c) = run(&["--seed", "8", "pipeline", "run", "--prompt", "a day out", "--subject", "kitty"]);
    assert_ne!(a["artifacts"], c["artifacts"]);

    let (code, failed) = run(&["pipeline", "run", "--prompt", "x", "--subject", "nobody"]);
    assert_eq!(code, Some(2));
    assert_eq!(failed["phase"], "Failed");

    let (code, ev) = run(&["eval", "--subject", "kitty"]);
    assert_eq!(code, Some(0), "{ev}");
    assert!(ev["fidelity_gain"].is_number());
    assert!(ev["trained"]["psnr"].is_number());
}
