use std::path::Path;
use std::process::{Command, Output};

fn lmcl(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmcl"))
        .args(args)
        .env("LMCL_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn status_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or_default()
        .to_string()
}

const SMALL: [&str; 7] = [
    "epochs=1",
    "widths=[8,8]",
    "embed_dim=4",
    "batch_size=8",
    "meta.meta_period=2",
    "dataset.per_class=12",
    "dataset.test_per_class=4",
];

#[test]
fn unknown_command_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmcl(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(status_line(&out).starts_with("status=error"));
}

#[test]
fn bad_override_exits_2_with_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmcl(&["train", "nope=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let line = status_line(&out);
    assert!(
        line.starts_with("status=error command=train kind=config exit=2"),
        "{line}"
    );
}

#[test]
fn print_config_emits_resolved_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmcl(&["train", "--print-config", "epochs=5"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["epochs"], 5);
}

#[test]
fn train_eval_probe_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "r1"];
    args.extend(SMALL);
    let out = lmcl(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(status_line(&out), "status=ok command=train exit=0");
    let ckpt = dir.path().join("r1").join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();

    let out = lmcl(&["eval", ckpt], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    let out = lmcl(&["probe", ckpt, "--steps", "20"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("probe"));

    let csv = dir.path().join("emb.csv");
    let out = lmcl(&["export-embeddings", ckpt, "--out", csv.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(csv.exists());

    let out = lmcl(&["eval", dir.path().join("missing").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(status_line(&out).contains("kind=io"));
}

#[test]
fn check_command_selects_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmcl(&["check", "--only", "mi_bound"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS mi_bound"));
    let out = lmcl(&["check", "--only", "nothing"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "r2", "optimizer.lr=1e30", "optimizer.momentum=0"];
    args.extend(SMALL);
    let out = lmcl(&args, dir.path());
    let line = status_line(&out);
    assert_eq!(out.status.code(), Some(1), "{line}");
    assert!(
        line.contains("kind=diverged") || line.contains("kind=non_finite"),
        "{line}"
    );
}
