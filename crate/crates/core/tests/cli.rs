use std::process::Command;

fn lab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_volterra-lab"))
}

#[test]
fn run_writes_a_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/ex3.3.json");
    let status = lab()
        .args(["run", "--scenario", "ex3.3", "--depth", "8", "--format", "json", "--out"])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed[0]["scenario"], "ex3.3");
    assert_eq!(parsed[0]["conclusion_held"], false);
    assert_eq!(parsed[0]["depth"], 8);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    let out = dir.path().join("out.csv");
    std::fs::write(&config, r#"{"scenario": "thm3.2-random", "trials": 3, "depth": 4, "seed": 1}"#).unwrap();
    let status = lab()
        .args(["run", "--seed", "9", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let row = reader.records().next().unwrap().unwrap();
    assert_eq!(&row[6], "4");
    assert_eq!(&row[7], "9");
}

#[test]
fn a_loose_tolerance_hides_a_counterexample() {
    let dir = tempfile::tempdir().unwrap();
    // A tolerance above the negative part hides the counterexample.
    let status = lab()
        .args(["run", "--scenario", "ex2.6", "--depth", "6", "--tolerance", "10", "--out"])
        .arg(dir.path().join("r.csv"))
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(1));
}

#[test]
fn unknown_scenarios_and_bad_depths_are_usage_errors() {
    let output = lab().args(["run", "--scenario", "nope"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("thm3.10-random"));
    let output = lab().args(["run", "--scenario", "ex3.3", "--depth", "17"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = lab()
        .env("VOLTERRA_LAB_OUT", dir.path())
        .args(["run", "--scenario", "ex2.6", "--depth", "5"])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("ex2.6.csv").exists());
}

#[test]
fn list_names_every_scenario() {
    let output = lab().arg("list").output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert_eq!(text.lines().count(), 19);
}
