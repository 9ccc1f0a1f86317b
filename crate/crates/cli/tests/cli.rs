use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn flowpath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowpath"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bench_into(dir: &Path, tag: &str, name: &str, config: &str, workload: &str, seed: &str) -> (String, String, String) {
    let out = dir.join(format!("{tag}-results.json"));
    let trace = dir.join(format!("{tag}-trace.json"));
    let events = dir.join(format!("{tag}-events.ndjson"));
    let o = flowpath(&[
        "bench",
        name,
        "--config",
        s(&repo(config)),
        "--workload",
        s(&repo(workload)),
        "--seed",
        seed,
        "--out",
        s(&out),
        "--trace-out",
        s(&trace),
        "--event-log",
        s(&events),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (
        fs::read_to_string(out).unwrap(),
        fs::read_to_string(trace).unwrap(),
        fs::read_to_string(events).unwrap(),
    )
}

#[test]
fn bench_writes_results_trace_and_events() {
    let dir = TempDir::new().unwrap();
    let (results, trace, events) = bench_into(
        dir.path(),
        "a",
        "multitenancy",
        "configs/cluster-multitenancy.json",
        "configs/workload-multitenancy.json",
        "3",
    );
    let r: Value = serde_json::from_str(&results).unwrap();
    assert_eq!(r["benchmark"], "multitenancy");
    assert_eq!(r["params"]["seed"], 3);
    assert_eq!(r["rows"].as_array().unwrap().len(), 5);
    let t: Value = serde_json::from_str(&trace).unwrap();
    let phases: Vec<&str> = t.as_array().unwrap().iter().filter_map(|e| e["ph"].as_str()).collect();
    assert!(phases.contains(&"X") && phases.contains(&"M"));
    assert!(events.lines().count() > 0);
    for line in events.lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir = TempDir::new().unwrap();
    let args = (
        "pipeline",
        "configs/cluster-pipeline.json",
        "configs/workload-pipeline.json",
    );
    let a = bench_into(dir.path(), "a", args.0, args.1, args.2, "9");
    let b = bench_into(dir.path(), "b", args.0, args.1, args.2, "9");
    assert_eq!(a, b);
    let m1 = bench_into(
        dir.path(),
        "m1",
        "multitenancy",
        "configs/cluster-default.json",
        "configs/workload-multitenancy.json",
        "1",
    );
    let m2 = bench_into(
        dir.path(),
        "m2",
        "multitenancy",
        "configs/cluster-default.json",
        "configs/workload-multitenancy.json",
        "2",
    );
    assert_ne!(m1.0, m2.0, "different seeds should jitter client starts differently");
}

#[test]
fn results_go_to_stdout_without_out() {
    let o = flowpath(&["bench", "deadlock"]);
    assert!(o.status.success());
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["benchmark"], "deadlock");
}

#[test]
fn unknown_benchmark_exits_2() {
    let o = flowpath(&["bench", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("cluster.json");
    fs::write(&bad, r#"{"islands": [], "dcn": {"latency_ns": 1, "gbps": 1.0}}"#).unwrap();
    assert_eq!(
        flowpath(&["bench", "deadlock", "--config", s(&bad)]).status.code(),
        Some(2)
    );
    fs::write(&bad, "not json").unwrap();
    assert_eq!(
        flowpath(&["bench", "deadlock", "--config", s(&bad)]).status.code(),
        Some(2)
    );
    let missing = dir.path().join("missing.json");
    assert_eq!(
        flowpath(&["bench", "deadlock", "--config", s(&missing)]).status.code(),
        Some(2)
    );
}

#[test]
fn workload_for_another_benchmark_exits_2() {
    let o = flowpath(&[
        "bench",
        "share",
        "--workload",
        s(&repo("configs/workload-pipeline.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_workload_field_exits_2() {
    let dir = TempDir::new().unwrap();
    let w = dir.path().join("w.json");
    fs::write(&w, r#"{"hosts": [2], "bogus": 1}"#).unwrap();
    assert_eq!(
        flowpath(&["bench", "dispatch", "--workload", s(&w)]).status.code(),
        Some(2)
    );
}

#[test]
fn run_program_reproduces_expected_digests() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.json");
    let trace = dir.path().join("t.json");
    let o = flowpath(&[
        "run",
        s(&repo("configs/program-two-slices.json")),
        "--runs",
        "3",
        "--out",
        s(&out),
        "--trace-out",
        s(&trace),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    let row = &r["rows"][0];
    assert_eq!(row["runs_completed"], 3);
    assert_eq!(row["audit_ok"], true);
    assert_eq!(row["result_digests"], row["expected_digests"]);
    assert!(fs::metadata(trace).unwrap().len() > 0);
}

#[test]
fn run_program_too_big_for_cluster_exits_2() {
    let dir = TempDir::new().unwrap();
    let small = dir.path().join("small.json");
    fs::write(
        &small,
        r#"{"islands": [{"hosts": 1, "devices_per_host": 4, "ici": {"latency_ns": 1000, "gbps": 100.0}}],
            "dcn": {"latency_ns": 50000, "gbps": 10.0},
            "pcie": {"latency_ns": 5000, "gbps": 16.0},
            "hbm_bytes": 16000000000}"#,
    )
    .unwrap();
    let o = flowpath(&[
        "run",
        s(&repo("configs/program-two-slices.json")),
        "--config",
        s(&small),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_program_exits_2() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("p.json");
    fs::write(
        &p,
        r#"{"client": 0, "slices": [], "nodes": [{"id": 0, "kind": "warp"}], "edges": []}"#,
    )
    .unwrap();
    assert_eq!(flowpath(&["run", s(&p)]).status.code(), Some(2));
}
