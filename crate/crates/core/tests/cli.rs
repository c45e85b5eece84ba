use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[network]\nhidden_units = 8\n[replay]\nmacro_batch = 16\nmini_batch = 8\n";

fn impactq(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_impactq"));
    cmd.args(args).env_remove("IMPACTQ_OUTPUT_ROOT");
    if let Some(root) = root {
        cmd.env("IMPACTQ_OUTPUT_ROOT", root);
    }
    cmd.output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = impactq(
        &["train", "--config", &cfg, "--episodes", "5", "--steps", "40", "--seed", "7", "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(metrics.starts_with("episode,length,return_0,disc_return_0,epsilon_0,"));
    assert!(out.join("agent0.ckpt").exists() && out.join("agent1.ckpt").exists());
    let snapshot = impactq::RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!((snapshot.seed, snapshot.train.episodes, snapshot.network.hidden_units), (7, 5, 8));
}

#[test]
fn default_config_trains() {
    let dir = tempfile::tempdir().unwrap();
    let o = impactq(&["train", "--config", "default", "--episodes", "2", "--steps", "20", "--out", "run"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn seed_sweep_runs_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = impactq(&["train", "--config", &cfg, "--episodes", "2", "--steps", "20", "--seeds", "1,2", "--out", "sweep"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = std::fs::read(dir.path().join("sweep/seed1/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("sweep/seed2/metrics.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn missing_config_is_usage_error() {
    let o = impactq(&["train", "--config", "/nonexistent/run.toml"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn invalid_override_is_usage_error() {
    let o = impactq(&["train", "--config", "default", "--eps-min", "1.5", "--out", "/tmp/unused"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eps_min"));
}

#[test]
fn unknown_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nlearning_rate = 1\n").unwrap();
    let o = impactq(&["train", "--config", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn bad_flag_is_usage_error() {
    assert_eq!(impactq(&["train", "--frobnicate"], None).status.code(), Some(2));
    assert_eq!(impactq(&["--help"], None).status.code(), Some(0));
}

#[test]
fn eval_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = impactq(&["train", "--config", &cfg, "--episodes", "2", "--steps", "30", "--out", "run"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpts = format!("{0}/run/agent0.ckpt,{0}/run/agent1.ckpt", dir.path().display());

    let eval = |out: &str| impactq(&["eval", "--config", &cfg, "--checkpoints", &ckpts, "--episodes", "5", "--steps", "100", "--seed", "3", "--out", out], Some(dir.path()));
    let a = eval("eval_a.json");
    let b = eval("eval_b.json");
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("mean_length"));
    let ja = std::fs::read(dir.path().join("eval_a.json")).unwrap();
    assert_eq!(ja, std::fs::read(dir.path().join("eval_b.json")).unwrap());

    // checkpoints do not match the default 3x64 network
    let o = impactq(&["eval", "--checkpoints", &ckpts, "--episodes", "1"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shape mismatch"));

    let surface = |out: &str| {
        impactq(
            &["export-value-surface", "--checkpoint", &format!("{}/run/agent0.ckpt", dir.path().display()), "--s-count", "5", "--theta-count", "3", "--out", out],
            Some(dir.path()),
        )
    };
    assert_eq!(surface("v1.csv").status.code(), Some(0));
    assert_eq!(surface("v2.csv").status.code(), Some(0));
    let v1 = std::fs::read_to_string(dir.path().join("v1.csv")).unwrap();
    assert_eq!(v1.lines().count(), 16);
    assert_eq!(v1.lines().next(), Some("s,theta,value"));
    assert_eq!(v1, std::fs::read_to_string(dir.path().join("v2.csv")).unwrap());

    let o = impactq(
        &["export-trajectory", "--config", &cfg, "--checkpoints", &ckpts, "--initial", "0,0,-0.05,0", "--steps", "25", "--out", "traj.csv"],
        Some(dir.path()),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let traj = std::fs::read_to_string(dir.path().join("traj.csv")).unwrap();
    let lines: Vec<&str> = traj.lines().collect();
    assert_eq!(lines[0], "step,s,s_dot,theta,theta_dot,u_0,u_1,r_0,r_1,terminated");
    assert!(lines.len() >= 2 && lines.len() <= 27);
    assert_eq!(lines[1], "0,0,0,-0.05,0,,,,,0");

    let o = impactq(
        &["export-trajectory", "--config", &cfg, "--checkpoints", &ckpts, "--initial", "3,0,0,0", "--out", "dead.csv"],
        Some(dir.path()),
    );
    assert_eq!(o.status.code(), Some(0));
    let dead = std::fs::read_to_string(dir.path().join("dead.csv")).unwrap();
    assert_eq!(dead.lines().count(), 2);
    assert!(dead.lines().nth(1).unwrap().ends_with(",1"));
}
