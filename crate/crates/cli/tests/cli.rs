use std::process::{Command, Output};

fn lcpred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcpred")).args(args).env("RUST_LOG", "off").output().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line on stderr");
    serde_json::from_str(line).expect("the error line is JSON")
}

#[test]
fn help_lists_every_stage() {
    let out = lcpred(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "ingest", "refpath", "convert", "segment", "features", "train", "evaluate", "report", "run-all", "config"] {
        assert!(text.contains(cmd), "help is missing {cmd}");
    }
}

#[test]
fn config_prints_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("c.json");
    std::fs::write(&f, r#"{"seed": 42, "features": {"per_class_lc": 7}}"#).unwrap();
    let out = lcpred(&["--config", f.to_str().unwrap(), "--seed", "5", "config"]);
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["features"]["per_class_lc"], 7);
    assert_eq!(cfg["populations"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_input_names_its_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = lcpred(&["--out", dir.path().to_str().unwrap(), "features", "--population", "exid"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["stage"], "features");
    assert_eq!(err["kind"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("produced by stage segment"));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("c.json");
    std::fs::write(&f, r#"{"plan": {"split_fraction": 1.5}}"#).unwrap();
    let out = lcpred(&["--config", f.to_str().unwrap(), "config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("split_fraction"));
}

#[test]
fn unknown_population_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lcpred(&["--out", dir.path().to_str().unwrap(), "synth", "--population", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["kind"], "config");
}
