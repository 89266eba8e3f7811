use std::path::Path;
use std::process::{Command, Output};

fn pivotlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pivotlab")).args(args).output().expect("binary runs")
}

const SMALL: &str = r#"
steps = 6
eval_every = 2
group_size = 4
seeds = [0, 1]

[env]
kind = "planted"
depth = 5
arity = 3
correct_fraction = 0.05

[init]
mode = "seeded-random"
scale = 1.5

[optim]
eta = 5.0

[eval]
mode = "exact"
"#;

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_owned()
}

const HEADER: &str = "step,train_success_rate,eval_success_rate,entropy,mean_length,unrecoverable_pivots,tokens_main,tokens_aux,estimator_w,estimator_b,wall_ms";

#[test]
fn fixture_verify_passes_and_dump_is_versioned() {
    let out = pivotlab(&["fixture", "verify"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.json");
    let out = pivotlab(&["fixture", "dump", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(doc["format_version"], 1);
}

#[test]
fn unknown_fixture_is_an_error() {
    let out = pivotlab(&["fixture", "verify", "appendix-z"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_metrics_checkpoints_and_budget_note() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = pivotlab(&["train", "-c", &cfg, "--strategy", "deep-grpo:p1b4", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for seed in [0, 1] {
        let csv = std::fs::read_to_string(out_dir.join(format!("metrics-seed-{seed}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(HEADER));
        assert_eq!(lines.count(), 4);
        let info: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join(format!("run-seed-{seed}.json"))).unwrap())
                .unwrap();
        assert!(info["budget"].as_str().unwrap().contains("rollout"));
        assert!(out_dir.join(format!("checkpoint-seed-{seed}.json")).exists());
    }
    assert!(out_dir.join("config.toml").exists());
}

#[test]
fn train_to_stdout_in_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = pivotlab(&["train", "-c", &cfg, "--seed", "3", "--format", "jsonl"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3]["step"], 6);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = pivotlab(&["train", "-c", &cfg, "--seed", "0", "--steps", "2", "--set", "eval_every=1"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for args in [
        vec!["train", "-c", cfg.as_str(), "--set", "bogus=1"],
        vec!["train", "-c", cfg.as_str(), "--set", "group_size=0"],
        vec!["train", "-c", cfg.as_str(), "--strategy", "deep-grpo:p0b8"],
        vec!["train", "-c", cfg.as_str(), "--format", "xml"],
        vec!["train", "-c", "/nonexistent/config.toml"],
    ] {
        let out = pivotlab(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "steps = \"many\"").unwrap();
    assert_eq!(pivotlab(&["train", "-c", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn numeric_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = pivotlab(&[
        "train", "-c", &cfg, "--seed", "0", "--strategy", "deep-grpo:p1b8", "--eta", "1e308", "--lambda", "1e308",
        "--set", "group_size=8", "--steps", "30",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_reads_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    assert!(pivotlab(&["train", "-c", &cfg, "--seed", "1", "--out", out_dir.to_str().unwrap()]).status.success());
    let ckpt = out_dir.join("checkpoint-seed-1.json");
    let out = pivotlab(&["eval", "-c", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--samples", "200"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(String::from_utf8(out.stdout).unwrap().trim()).unwrap();
    let exact = report["exact"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&exact));
    assert!(report["mean_length"].as_f64().unwrap() == 5.0);

    let other = dir.path().join("other.toml");
    std::fs::write(&other, SMALL.replace("depth = 5", "depth = 4")).unwrap();
    let out = pivotlab(&["eval", "-c", other.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn sweep_writes_summary_and_per_seed_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = pivotlab(&[
        "sweep", "-c", &cfg, "--axis", "optim.lambda", "--values", "0,1", "--out", out_dir.to_str().unwrap(),
        "--strategy", "deep-grpo:p1b4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out_dir.join("optim.lambda=0").join("seed-1.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let out = pivotlab(&["gradcheck", "--batches", "4", "--thorough"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("0 failed"));
}

#[test]
fn bundled_config_loads() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/calibrated.toml");
    let out = pivotlab(&["train", "-c", path, "--seed", "0", "--steps", "1", "--set", "prompts_per_step=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}
