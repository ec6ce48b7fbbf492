use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const W_MODEL: &str = r#"
version = 1

[system]
kind = "collaborative"
classes = [
  { id = "1", arrival = "3/10", servers = ["1"] },
  { id = "2", arrival = "3/10", servers = ["2"] },
  { id = "3", arrival = "1/2", servers = ["1", "2"] },
]
servers = [{ id = "1", rate = 1 }, { id = "2", rate = 1 }]

[analysis]
counts = [[1, 0, 1]]
simulation_check = false

[simulation]
horizon = 20000.0
replications = 4
"#;

const CYCLE: &str = r#"
version = 1

[system]
kind = "collaborative"
classes = [
  { id = "a", arrival = 0.4, servers = ["1", "2"] },
  { id = "b", arrival = 0.4, servers = ["2", "3"] },
  { id = "c", arrival = 0.4, servers = ["3", "1"] },
]
servers = [{ id = "1", rate = 1 }, { id = "2", rate = 1 }, { id = "3", rate = 1 }]
"#;

fn write_config(dir: &TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, command: &str, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skillq"))
        .arg("--config")
        .arg(config)
        .args(["--command", command])
        .args(extra)
        .env_remove("SKILLQ_THREADS")
        .output()
        .unwrap()
}

fn records(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn value<'a>(recs: &'a [Value], query: &str) -> &'a Value {
    &recs.iter().find(|r| r["query"] == query).unwrap_or_else(|| panic!("no record {query}"))["value"]
}

#[test]
fn means_on_w_model() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let out = run(&cfg, "means", &[]);
    assert_eq!(out.status.code(), Some(0));
    let recs = records(&out);
    assert_eq!(value(&recs, "pi_empty").as_f64().unwrap(), 0.315);
    assert_eq!(value(&recs, "pi_empty.rational"), "63/200");
    assert!((value(&recs, "L[1]").as_f64().unwrap() - 0.547619).abs() < 1e-6);
    assert!((value(&recs, "L[3]").as_f64().unwrap() - 0.555556).abs() < 1e-6);
    assert_eq!(value(&recs, "L[3].rational"), "5/9");
}

#[test]
fn check_lists_every_subset_margin() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let out = run(&cfg, "check", &[]);
    assert_eq!(out.status.code(), Some(0));
    let recs = records(&out);
    let margins: Vec<&Value> = recs.iter().filter(|r| r["query"].as_str().unwrap().starts_with("margin")).collect();
    assert_eq!(margins.len(), 7);
    let all = value(&recs, "margin{1,2,3}");
    assert!((all["margin"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    assert_eq!(value(&recs, "stability")["stable"], true);
    assert_eq!(value(&recs, "nested")["nested"], true);
}

#[test]
fn unstable_check_exits_two_with_witness() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let out = run(&cfg, "check", &["--set", "system.classes.0.arrival=1.1"]);
    assert_eq!(out.status.code(), Some(2));
    let recs = records(&out);
    let err = value(&recs, "error");
    assert_eq!(err["reason"], "unstable");
    assert_eq!(err["witness"], serde_json::json!(["1"]));
    assert!(recs.iter().any(|r| r["query"] == "margin{1}"));
}

#[test]
fn analyze_reports_aggregate_spot_value() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let out = run(&cfg, "analyze", &["--set", "analysis.states=[\"(1,3)\"]"]);
    assert_eq!(out.status.code(), Some(0));
    let recs = records(&out);
    assert!((value(&recs, "pi_counts(1,0,1)").as_f64().unwrap() - 0.0354375).abs() < 1e-12);
    assert!((value(&recs, "pi_empty").as_f64().unwrap() - 0.315).abs() < 1e-12);
    assert!(value(&recs, "pi(1,3)").as_f64().unwrap() > 0.0);
}

#[test]
fn numbers_carry_derivation_tags() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    for command in ["check", "analyze", "means", "nested", "simulate"] {
        let out = run(&cfg, command, &[]);
        assert_eq!(out.status.code(), Some(0), "{command}");
        for r in records(&out) {
            let tag = r["tag"].as_str().unwrap();
            let known = tag == "input"
                || tag == "analytic-exact"
                || tag.starts_with("analytic-truncated(")
                || tag.starts_with("simulated(se=");
            assert!(known, "{command}: {r}");
            if tag != "input" {
                assert!(r["error_bound"].is_number(), "{command}: {r}");
            }
        }
    }
}

#[test]
fn output_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let a = run(&cfg, "simulate", &["--seed", "7"]);
    let b = run(&cfg, "simulate", &["--seed", "7"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let threaded = Command::new(env!("CARGO_BIN_EXE_skillq"))
        .arg("--config")
        .arg(&cfg)
        .args(["--command", "simulate", "--seed", "7"])
        .env("SKILLQ_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(a.stdout, threaded.stdout);
    let c = run(&cfg, "simulate", &["--seed", "8"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.toml", &W_MODEL.replace("[analysis]", "[analysis]\ntolerence = 1e-9"));
    let out = run(&cfg, "means", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(value(&records(&out), "error")["reason"], "config");
    let cfg = write_config(&dir, "v2.toml", &W_MODEL.replace("version = 1", "version = 2"));
    assert_eq!(run(&cfg, "means", &[]).status.code(), Some(1));
}

#[test]
fn invalid_systems_exit_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let out = run(&cfg, "means", &["--set", "system.classes.0.servers=[\"9\"]"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(value(&records(&out), "error")["reason"], "validation");
}

#[test]
fn unmet_tolerance_exits_three() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let ok = run(&cfg, "validate", &["--set", "analysis.truncation=5"]);
    assert_eq!(ok.status.code(), Some(0));
    let out = run(&cfg, "validate", &["--set", "analysis.truncation=5", "--set", "analysis.generator_tolerance=0.0"]);
    assert_eq!(out.status.code(), Some(3));
    let recs = records(&out);
    assert_eq!(value(&recs, "check.generator_agreement")["pass"], false);
    assert_eq!(value(&recs, "error")["failed"], serde_json::json!(["generator_agreement"]));
}

#[test]
fn non_nested_systems() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "cycle.toml", CYCLE);
    let check = run(&cfg, "check", &[]);
    assert_eq!(check.status.code(), Some(0));
    assert_eq!(value(&records(&check), "nested")["nested"], false);
    let nested = run(&cfg, "nested", &[]);
    assert_eq!(nested.status.code(), Some(1));
    assert_eq!(value(&records(&nested), "error")["reason"], "not_nested");
    let means = run(&cfg, "means", &[]);
    assert_eq!(means.status.code(), Some(0));
}

#[test]
fn activation_table_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let table = dir.path().join("table.json");
    let export = format!("analysis.export=\"{}\"", table.display());
    let out = run(&cfg, "activation", &["--set", "system.kind=nc_rais", "--set", &export]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(value(&records(&out), "table.rule"), "IdleOrderAverage");
    let states = "analysis.states=[\"([1],1)\", \"([1],[2],3,1)\"]";
    let built = run(&cfg, "analyze", &["--set", "system.kind=nc_rais", "--set", "analysis.counts=[]", "--set", states]);
    let import = format!("analysis.table=\"{}\"", table.display());
    let loaded = run(
        &cfg,
        "analyze",
        &["--set", "system.kind=nc_rais", "--set", "analysis.counts=[]", "--set", states, "--set", &import],
    );
    assert_eq!(built.status.code(), Some(0));
    assert_eq!(built.stdout, loaded.stdout);
}

#[test]
fn table_format_and_out_file() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let path = dir.path().join("report.txt");
    let out = run(&cfg, "means", &["--format", "table", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let text = fs::read_to_string(&path).unwrap();
    let recs = records(&run(&cfg, "means", &[]));
    assert_eq!(text.lines().count(), recs.len() + 1);
    assert!(text.lines().any(|l| l.starts_with("pi_empty ") && l.contains("0.315") && l.contains("analytic-exact")));
}

#[test]
fn event_log_is_written() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "w.toml", W_MODEL);
    let log = dir.path().join("events.ndjson");
    let set = format!("simulation.event_log=\"{}\"", log.display());
    let out = run(&cfg, "simulate", &["--set", "system.kind=nc_alis", "--set", "analysis.counts=[]", "--set", &set]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&log).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["event"], "arrival");
    assert!(text.lines().any(|l| l.contains("\"service_start\"")));
    assert!(text.lines().any(|l| l.contains("\"completion\"")));
}
