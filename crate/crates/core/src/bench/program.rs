use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{audit, chrome_trace, round, BenchError, BenchOutput, Results};
use crate::exec::{self, ClientPlan, CostModel, DispatchMode, Pacing, Program, RuntimeConfig, SubmitMode};
use crate::hardware::{ClusterConfig, Topology};
use crate::ir;
use crate::resman::{DeviceMap, ResourceManager};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub runs: u32,
    pub submit: SubmitMode,
    pub dispatch: DispatchMode,
    pub pacing: Pacing,
    pub cost: CostModel,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            runs: 1,
            submit: SubmitMode::Chained,
            dispatch: DispatchMode::Parallel,
            pacing: Pacing::AwaitResults,
            cost: CostModel::default(),
        }
    }
}

/// Place a traced program's slices with the resource manager, lower it and
/// run it for one client.
pub fn run_program(program_json: &str, cluster: &ClusterConfig, opts: &RunOptions) -> Result<BenchOutput, BenchError> {
    cluster.validate()?;
    if opts.runs == 0 {
        return Err(BenchError::Workload("runs must be positive".into()));
    }
    let traced = ir::deserialize(program_json).map_err(|e| BenchError::Program(e.to_string()))?;
    let topo = Arc::new(Topology::new(cluster)?);
    let mut rm = ResourceManager::new(&topo);
    let mut map = DeviceMap::default();
    for s in &traced.slices {
        let (_, devices) = rm
            .allocate_slice(s.request())
            .map_err(|e| BenchError::Exec(exec::ExecError::Capacity(e.to_string())))?;
        map.insert(s.id, devices);
    }
    let lowered = ir::lower(&traced, &map, &topo).map_err(|e| BenchError::Program(e.to_string()))?;
    let program = Arc::new(Program::new("program", lowered, &topo)?);
    let cfg = RuntimeConfig {
        cost: opts.cost.clone(),
        dispatch: opts.dispatch,
        record_timeline: true,
        event_log: true,
        ..RuntimeConfig::default()
    };
    let plan = ClientPlan::new(traced.client, program.clone(), opts.runs)
        .submit(opts.submit)
        .pacing(opts.pacing);
    let mut e = exec::run(&topo, &cfg, vec![plan])?;
    let client = &e.clients[0];
    let makespan = e.end_ns();
    let kernels = program.kernels() * opts.runs as u64;
    let row = json!({
        "runs_completed": client.runs_completed,
        "makespan_ns": makespan,
        "mean_run_ns": client.run_spans.iter().map(|(a, b)| b - a).sum::<u64>() / client.run_spans.len().max(1) as u64,
        "kernels": e.samples.len(),
        "kernels_per_sec": round(kernels as f64 * 1e9 / makespan.max(1) as f64, 3),
        "result_digests": client.last_digests.iter().map(|d| format!("{d:016x}")).collect::<Vec<_>>(),
        "expected_digests": program.expected_digests().iter().map(|d| format!("{d:016x}")).collect::<Vec<_>>(),
        "hygiene": e.hygiene,
        "audit_ok": audit(&e, kernels),
    });
    let params = json!({
        "program_digest": format!("{:016x}", ir::digest(&traced)),
        "client": traced.client.0,
        "options": opts,
    });
    Ok(BenchOutput {
        results: Results {
            benchmark: "run".into(),
            params,
            rows: vec![row],
        },
        trace: chrome_trace(&e),
        events: e.event_log.take().unwrap_or_default(),
    })
}
