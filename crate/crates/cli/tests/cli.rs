use std::path::Path;
use std::process::{Command, Output};

fn cmn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn generate_train_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("tiny.toml"),
        "seed = 5\ntrain_scenes = 12\ntest_scenes = 4\n[train]\niterations = 6\nembed_dim = 6\nhidden_dim = 4\nlog_every = 3\nprobe_scenes = 4\n",
    )
    .unwrap();
    ok(&cmn(&["generate", "--config", "tiny.toml", "--out", "data"], d));
    assert!(d.join("data/train.jsonl").exists() && d.join("data/test.jsonl").exists());

    let stdout = ok(&cmn(
        &["train", "--config", "tiny.toml", "--dataset", "data", "--model", "cmn", "--supervision", "strong", "--out", "run"],
        d,
    ));
    assert!(stdout.contains("P@1-subj"));
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    ok(&cmn(&["eval", "--checkpoint", "run/checkpoint.cmn", "--dataset", "data", "--out", "eval"], d));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["n_expressions"], 8);

    let test = std::fs::read_to_string(d.join("data/test.jsonl")).unwrap();
    let scene: serde_json::Value = serde_json::from_str(test.lines().nth(1).unwrap()).unwrap();
    let id = scene["scene_id"].as_str().unwrap();
    let stdout = ok(&cmn(
        &["inspect", "--checkpoint", "run/checkpoint.cmn", "--dataset", "data", "--scene", id, "--out", "insp"],
        d,
    ));
    assert!(stdout.contains("rel"));
    assert!(d.join("insp/dump.json").exists());

    let missing = cmn(&["inspect", "--checkpoint", "run/checkpoint.cmn", "--dataset", "data", "--scene", "nope"], d);
    assert!(!missing.status.success());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "seed = 5\ntrain_scenes = 2\ntest_scenes = 1\n").unwrap();
    ok(&cmn(&["generate", "--config", "c.toml", "--out", "a"], d));
    ok(&cmn(&["generate", "--config", "c.toml", "--seed", "6", "--out", "b"], d));
    ok(&cmn(&["generate", "--config", "c.toml", "--seed", "5", "--out", "c"], d));
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_ne!(read("a/train.jsonl"), read("b/train.jsonl"));
    assert_eq!(read("a/train.jsonl"), read("c/train.jsonl"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = cmn(&["generate", "--config", "bad.toml"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert!(!cmn(&["eval", "--checkpoint", "none.cmn", "--dataset", "none.jsonl"], d).status.success());
    std::fs::write(d.join("junk.cmn"), b"CMN1junk").unwrap();
    let out = cmn(&["eval", "--checkpoint", "junk.cmn", "--dataset", "none.jsonl"], d);
    assert!(String::from_utf8_lossy(&out.stderr).contains("format"));
    assert!(!cmn(&["train", "--model", "baseline", "--supervision", "strong", "--dataset", "x"], d).status.success());
}

#[test]
fn grad_check_status_matches_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmn(&["grad-check", "--out", "gc"], dir.path());
    let reports: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("gc/grad_check.json")).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    let within = reports.iter().all(|r| r["max_rel_err"].as_f64().unwrap() <= 1e-4);
    assert_eq!(out.status.success(), within);
}
