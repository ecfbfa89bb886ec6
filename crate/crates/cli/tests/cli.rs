use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn marlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marlab"))
        .args(args)
        .env_remove("MARLAB_SEED")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--out-dir", out, "--total-steps", "40", "--set", "eval_interval=20", "--set", "eval_episodes=20"];
    args.extend_from_slice(extra);
    marlab(&args)
}

#[test]
fn oracle_nash_prints_json() {
    let o = marlab(&["oracle", "nash", "matching_pennies"]);
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v["mix1"], serde_json::json!([0.5, 0.5]));
    assert_eq!(v["value"].as_f64(), Some(0.0));
}

#[test]
fn oracle_argmax_and_bestresp() {
    let v = stdout_json(&marlab(&["oracle", "argmax", "coop_climb"]));
    assert_eq!(v, serde_json::json!({ "joint": [0, 0], "value": 11.0 }));
    let v = stdout_json(&marlab(&["oracle", "bestresp", "matching_pennies", "--mix", "0.7,0.3"]));
    assert!((v["value"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    let v = stdout_json(&marlab(&["oracle", "qiter", "two_step_coop"]));
    assert!((v["values"][0].as_f64().unwrap() - 9.9).abs() < 1e-9);
}

#[test]
fn bad_fixture_exits_2() {
    let o = marlab(&["oracle", "nash", "not_a_game"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(marlab(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = train(d.path(), &["--algo", "qmix", "--env", "two_step_coop", "--seed", "4"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "checkpoint.json", "config_echo.json"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    let m = std::fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(m, std::fs::read(b.path().join("metrics.csv")).unwrap());
    let header = String::from_utf8(m).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "step,episodes,loss,epsilon,eval_return_mean,eval_return_per_agent,extra");

    let ck = a.path().join("checkpoint.json");
    let o = marlab(&["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["mean_return_per_agent"].as_array().unwrap().len(), 2);
    assert!(a.path().join("eval_summary.json").exists());
}

#[test]
fn seed_env_var_overrides_config_seed() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, r#"{"algo":"selfplay","env":"rock_paper_scissors","seed":1}"#).unwrap();
    let out = d.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_marlab"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--total-steps", "5"])
        .env("MARLAB_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config_echo.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 42);
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let o = train(d.path(), &["--algo", "qmix", "--env", "matching_pennies"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible"));
    let o = train(d.path(), &["--algo", "qmix", "--env", "two_step_coop", "--set", "nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = train(d.path(), &["--algo", "qmix", "--env", "two_step_coop", "--set", "lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tampered_checkpoint_exits_1() {
    let d = tempfile::tempdir().unwrap();
    assert!(train(d.path(), &["--algo", "iql", "--env", "matching_pennies"]).status.success());
    let ck = d.path().join("checkpoint.json");
    let text = std::fs::read_to_string(&ck).unwrap();
    std::fs::write(&ck, text.replacen("\"iql\"", "\"vdn\"", 1)).unwrap();
    let o = marlab(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
    let o = marlab(&["eval", "--checkpoint", d.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_and_detects_fault() {
    let o = marlab(&["gradcheck", "--instances", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    let suites = v["suites"].as_array().unwrap();
    assert_eq!(suites.len(), 2);
    assert!(suites.iter().all(|s| s["max_rel_error"].as_f64().unwrap() < 1e-4));

    let o = marlab(&["gradcheck", "--instances", "30", "--inject-fault", "elu-sign"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["passed"], false);
}

#[test]
fn selfplay_threads_flag_matches_single_thread() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let base = ["--algo", "selfplay", "--env", "rock_paper_scissors"];
    assert!(train(a.path(), &base).status.success());
    let mut with_threads = base.to_vec();
    with_threads.extend(["--threads", "3"]);
    assert!(train(b.path(), &with_threads).status.success());
    assert_eq!(
        std::fs::read(a.path().join("metrics.csv")).unwrap(),
        std::fs::read(b.path().join("metrics.csv")).unwrap()
    );
}
