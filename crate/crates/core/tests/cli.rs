use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
n_demos = 60

[env]
n_goal_clusters = 2

[model]
K = 2

[rl]
n_iterations = 3
n_per_iter = 15
eval_episodes = 40
"#;

fn lampo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lampo")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = lampo(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, SMALL).unwrap();
    cfg.to_str().unwrap().to_owned()
}

/// The curve without its wall-clock column.
fn curve_without_timing(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
        .collect()
}

#[test]
fn full_workflow_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let out = out.to_str().unwrap();
        run_ok(&["gen-demos", "--config", &cfg, "--out", out]);
        let imitate = run_ok(&["imitate", "--config", &cfg, "--out", out]);
        assert!(imitate.contains("held_out_log_likelihood"));
        run_ok(&["improve", "--config", &cfg, "--out", out]);
        run_ok(&["eval", "--config", &cfg, "--out", out]);
    }
    for file in ["demos.jsonl", "model.json", "policies.jsonl", "buffer.jsonl", "model_improved.json", "eval.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    assert_eq!(curve_without_timing(&a.join("learning_curve.csv")), curve_without_timing(&b.join("learning_curve.csv")));

    let demos = fs::read_to_string(a.join("demos.jsonl")).unwrap();
    assert_eq!(demos.lines().count(), 60);
    let curve = fs::read_to_string(a.join("learning_curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "iteration,mean_reward,success_rate,J_hat,eta,mean_g,ess,wall_time_s");
    assert_eq!(lines.count(), 3);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["gen-demos", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "1"]);
    run_ok(&["gen-demos", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "2"]);
    assert_ne!(fs::read(a.join("demos.jsonl")).unwrap(), fs::read(b.join("demos.jsonl")).unwrap());
}

#[test]
fn full_run_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("run");
    let stdout = run_ok(&["full-run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let line: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(line["final_success_rate"].as_f64().is_some());
    for file in ["summary.json", "diagnostics.csv", "learning_curve.csv"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
}

fn assert_one_line_error(out: &Output, kind: &str) {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["error"], kind, "stderr: {stderr}");
    assert!(v["message"].as_str().is_some());
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nn_itertions = 4\n").unwrap();
    let out = lampo(&["gen-demos", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_one_line_error(&out, "config");
}

#[test]
fn invalid_value_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[rl]\nchi = -1.0\n").unwrap();
    let out = lampo(&["imitate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_one_line_error(&out, "config");
}

#[test]
fn improve_without_model_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = lampo(&["improve", "--config", &cfg, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_one_line_error(&out, "io");
}
