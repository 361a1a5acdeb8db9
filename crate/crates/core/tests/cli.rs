//! Drives the `reward-workbench` binary on a tiny config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a debug build
epochs = 2
steps_per_epoch = 5
human_per_task = 12
robot_success_per_task = 10
robot_failure_per_task = 10
eval_success_per_task = 6
eval_failure_per_task = 6
";

fn run(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reward-workbench"));
    cmd.args(args).env_remove("REWARD_SEED");
    if let Some(s) = seed_env {
        cmd.env("REWARD_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn train(dir: &Path, cfg: &str, name: &str, flag_seed: Option<&str>, env_seed: Option<&str>) -> Vec<u8> {
    let out_path = dir.join(name);
    let out = out_path.to_str().unwrap();
    let mut args = vec!["train", "--config", cfg, "--out", out];
    if let Some(s) = flag_seed {
        args.extend(["--seed", s]);
    }
    ok(&run(&args, env_seed));
    fs::read(&out_path).unwrap()
}

#[test]
fn gen_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data.json");
    let model = dir.path().join("model.json");
    let metrics = dir.path().join("metrics.jsonl");
    let report = dir.path().join("sep.json");

    let out = run(
        &[
            "gen-data",
            "--tasks",
            "open-drawer,poke-cup",
            "--human-per-task",
            "12",
            "--robot-success-per-task",
            "10",
            "--robot-failure-per-task",
            "10",
            "--out",
            data.to_str().unwrap(),
        ],
        None,
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 64 clips"));

    ok(&run(
        &[
            "train",
            "--config",
            &cfg,
            "--out",
            model.to_str().unwrap(),
            "--metrics",
            metrics.to_str().unwrap(),
        ],
        None,
    ));
    let lines = fs::read_to_string(&metrics).unwrap();
    assert!(lines.lines().count() >= 3);
    for l in lines.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }

    ok(&run(
        &[
            "eval-sep",
            "--config",
            &cfg,
            "--model",
            model.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ],
        None,
    ));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v.is_object() || v.is_array());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nlearning_rate = 0.1\n");
    let model = dir.path().join("m.json");
    let out = run(&["train", "--config", &cfg, "--out", model.to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let by_env = train(dir.path(), &cfg, "a.json", None, Some("3"));
    let by_flag = train(dir.path(), &cfg, "b.json", Some("3"), Some("4"));
    let other = train(dir.path(), &cfg, "c.json", None, Some("4"));
    assert_eq!(by_env, by_flag);
    assert_ne!(by_env, other);
}

#[test]
fn grad_check_passes() {
    let out = run(&["grad-check", "--batches", "2"], None);
    ok(&out);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
