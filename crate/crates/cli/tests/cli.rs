use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gridcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn data(name: &str) -> String {
    format!("{}/../../data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_scenario(dir: &Path, seed: &str) {
    let config = dir.join("scenario.json");
    fs::write(
        &config,
        r#"{"n_periods": 3, "n_tau": 20, "n_anomalies": 3, "min_anomaly_coupling": 0.001}"#,
    )
    .unwrap();
    let out = dir.join(format!("s{seed}"));
    let o = gridcal(&[
        "simulate",
        "--case",
        &data("case118.m"),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "ticks=60 periods=3 anomalies=3 sensors=30");
}

#[test]
fn parse_prints_a_summary() {
    let o = gridcal(&["parse", &data("case9.m")]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("buses=9 branches=9 in_service=9 slack=1 base_mva=100 case_id="));
    let o = gridcal(&["parse", &data("case14.m")]);
    assert!(stdout(&o).starts_with("buses=14 branches=20 in_service=20 slack=1 base_mva=100"));
}

#[test]
fn missing_case_is_a_data_error() {
    let o = gridcal(&["parse", "/no/such/case.m"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/case.m"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(gridcal(&["parse"]).status.code(), Some(1));
    assert_eq!(
        gridcal(&["detect", "--scenario", "x", "--variant", "fancy"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(gridcal(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"n_tau": 0}"#).unwrap();
    let o = gridcal(&[
        "simulate",
        "--case",
        &data("case9.m"),
        "--config",
        bad.to_str().unwrap(),
        "--out",
        "unused",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_scenario(dir.path(), "4");
    fs::rename(dir.path().join("s4"), dir.path().join("first")).unwrap();
    small_scenario(dir.path(), "4");
    for f in ["config.json", "case.json", "topologies.json", "frames.csv", "truth.csv"] {
        let a = fs::read(dir.path().join("first").join(f)).unwrap();
        let b = fs::read(dir.path().join("s4").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn detect_emits_one_verdict_per_tick() {
    let dir = tempfile::tempdir().unwrap();
    small_scenario(dir.path(), "2");
    let scenario = dir.path().join("s2");
    let o = gridcal(&["detect", "--scenario", scenario.to_str().unwrap(), "--warmup", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 60);
    for (i, v) in lines.iter().enumerate() {
        assert_eq!(v["tick"], i);
        assert!(v["anomalous"].is_boolean());
    }
    let truth = fs::read_to_string(scenario.join("truth.csv")).unwrap();
    for row in truth.lines().skip(1) {
        let tick: usize = row.split(',').next().unwrap().parse().unwrap();
        assert_eq!(lines[tick]["anomalous"], true, "tick {tick}");
    }
}

#[test]
fn dump_mapping_writes_its_tables() {
    let dir = tempfile::tempdir().unwrap();
    small_scenario(dir.path(), "3");
    let scenario = dir.path().join("s3");
    let topo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(scenario.join("topologies.json")).unwrap()).unwrap();
    let sensor = topo["sensors"][0].as_u64().unwrap();
    let case = fs::read_to_string(scenario.join("case.json")).unwrap();
    let case: serde_json::Value = serde_json::from_str(&case).unwrap();
    let edge = case["branches"]
        .as_array()
        .unwrap()
        .iter()
        .find(|b| b["from_bus"] == sensor || b["to_bus"] == sensor)
        .unwrap()["id"]
        .to_string();
    let out = dir.path().join("dump");
    let o = gridcal(&[
        "dump-mapping",
        "--scenario",
        scenario.to_str().unwrap(),
        "--edge",
        &edge,
        "--dump-sensitivities",
        "--dump-weights",
        "30",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mapping = fs::read_to_string(out.join("mapping.csv")).unwrap();
    assert_eq!(mapping.lines().count(), 61);
    assert!(mapping.starts_with("tick,period,measured_mw,corrected_mw,projected_mw,mapped_mw,baseline_mw"));
    let weights = fs::read_to_string(out.join("weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 31);
    assert!(out.join("sensitivities.csv").is_file());
}

#[test]
fn evaluate_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("eval.json");
    fs::write(
        &config,
        format!(
            r#"{{"case": "{}", "scenario": {{"n_periods": 3, "n_tau": 20, "n_anomalies": 3}},
                 "sensor_fractions": [0.25, 1.0], "seeds": [1]}}"#,
            data("case118.m")
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = gridcal(&[
        "evaluate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 7);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 7);
}
