//! Benchmark workloads. Each benchmark takes a cluster template, workload
//! parameters and a seed, and produces a results table plus an optional
//! Chrome trace.

mod dispatch;
mod pipeline;
mod program;
mod scaling;
mod tenancy;
mod trace;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::exec::{ExecError, Execution};
use crate::hardware::{ClusterConfig, HardwareError, IslandConfig, Topology};
use crate::simcore::LogEntry;

pub use dispatch::{DeadlockParams, DispatchParams};
pub use pipeline::{bubble_oracle, PipelineParams};
pub use program::{run_program, RunOptions};
pub use scaling::{crossover_point, per_node_overhead_ns, CrossoverParams, ParityParams};
pub use tenancy::{ShareParams, TenancyParams};
pub use trace::{chrome_trace, TraceEvent};

pub const BENCHMARKS: &[&str] = &[
    "dispatch",
    "crossover",
    "parity",
    "pipeline",
    "multitenancy",
    "share",
    "deadlock",
];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark `{0}`; expected one of {BENCHMARKS:?}")]
    Unknown(String),
    #[error("bad workload: {0}")]
    Workload(String),
    #[error("bad program: {0}")]
    Program(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Hardware(#[from] HardwareError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Results {
    pub benchmark: String,
    pub params: Value,
    pub rows: Vec<Value>,
}

impl Results {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }
}

pub struct BenchOutput {
    pub results: Results,
    pub trace: Vec<TraceEvent>,
    /// Event log of the traced run.
    pub events: Vec<LogEntry>,
}

impl BenchOutput {
    pub fn trace_json(&self) -> String {
        let mut s = serde_json::to_string(&self.trace).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn events_ndjson(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            s.push('\n');
        }
        s
    }
}

impl BenchError {
    /// Bad input or a workload that does not fit, as opposed to a run
    /// that went wrong.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, BenchError::Exec(ExecError::Deadlock(_)))
    }
}

/// Run benchmark `name`. `workload` overrides the default parameters;
/// missing fields keep their defaults. It is either the parameter object
/// itself or `{"benchmark": name, "params": {...}}`.
pub fn run(
    name: &str,
    cluster: &ClusterConfig,
    workload: Option<&Value>,
    seed: u64,
) -> Result<BenchOutput, BenchError> {
    cluster.validate()?;
    let workload = match workload {
        Some(Value::Object(m)) if m.contains_key("benchmark") || m.contains_key("params") => {
            if let Some(b) = m.get("benchmark") {
                if b.as_str() != Some(name) {
                    return Err(BenchError::Workload(format!(
                        "workload is for benchmark {b}, not `{name}`"
                    )));
                }
            }
            m.get("params")
        }
        other => other,
    };
    match name {
        "dispatch" => dispatch::run(cluster, &params(workload)?, seed),
        "crossover" => scaling::run_crossover(cluster, &params(workload)?, seed),
        "parity" => scaling::run_parity(cluster, &params(workload)?, seed),
        "pipeline" => pipeline::run(cluster, &params(workload)?, seed),
        "multitenancy" => tenancy::run_tenancy(cluster, &params(workload)?, seed),
        "share" => tenancy::run_share(cluster, &params(workload)?, seed),
        "deadlock" => dispatch::run_deadlock(cluster, &params(workload)?, seed),
        other => Err(BenchError::Unknown(other.to_string())),
    }
}

fn params<P: DeserializeOwned + Default>(w: Option<&Value>) -> Result<P, BenchError> {
    match w {
        None => Ok(P::default()),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| BenchError::Workload(e.to_string())),
    }
}

fn describe<P: Serialize>(p: &P, seed: u64) -> Value {
    let mut v = serde_json::to_value(p).expect("params serialize");
    if let Value::Object(m) = &mut v {
        m.insert("seed".into(), seed.into());
    }
    v
}

/// `islands` copies of the template's first island, each with `hosts`
/// hosts, keeping the template's links and device memory.
pub fn shaped(template: &ClusterConfig, islands: u32, hosts: u32) -> Result<Arc<Topology>, BenchError> {
    let base = &template.islands[0];
    let cfg = ClusterConfig {
        islands: (0..islands)
            .map(|_| IslandConfig {
                hosts,
                mesh: Vec::new(),
                ..base.clone()
            })
            .collect(),
        ..template.clone()
    };
    Ok(Arc::new(Topology::new(&cfg)?))
}

/// Busy device time inside `[from, to)`, per client.
pub fn busy_by_client(e: &Execution, from: u64, to: u64) -> BTreeMap<u32, u64> {
    let mut out = BTreeMap::new();
    for s in &e.samples {
        let a = s.start_ns.max(from);
        let b = s.end_ns.min(to);
        if b > a {
            *out.entry(s.client).or_default() += b - a;
        }
    }
    out
}

/// First kernel start and last kernel end.
pub fn kernel_window(e: &Execution) -> (u64, u64) {
    let start = e.samples.iter().map(|s| s.start_ns).min().unwrap_or(0);
    let end = e.samples.iter().map(|s| s.end_ns).max().unwrap_or(0);
    (start, end)
}

/// The completed kernels and the last completion time counted from the
/// event log agree with the samples the throughput numbers came from, and
/// every buffer was returned.
pub fn audit(e: &Execution, expected_kernels: u64) -> bool {
    let logged = e.summary.kind("kernel_complete");
    logged.count == e.samples.len() as u64
        && logged.count == expected_kernels
        && logged.last_ns == e.last_kernel_end()
        && e.hygiene.clean()
}

fn round(x: f64, digits: i32) -> f64 {
    let m = 10f64.powi(digits);
    (x * m).round() / m
}
