use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{audit, chrome_trace, describe, kernel_window, round, shaped, BenchError, BenchOutput, Results};
use crate::exec::{self, ClientPlan, CostModel, DispatchMode, Program, ProgramBuilder, RuntimeConfig};
use crate::hardware::{ClusterConfig, Topology};
use crate::ids::ClientId;
use crate::ir::CompiledFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineParams {
    /// (stages, microbatches) pairs.
    pub configs: Vec<(u32, u32)>,
    pub stage_ms: f64,
    /// Activation bytes each stage shard hands to the next stage.
    pub bytes: u64,
    pub microbatch_size: u32,
    /// Island counts to split the stages over.
    pub islands: Vec<u32>,
    pub dispatch: DispatchMode,
    pub cost: CostModel,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            configs: vec![(4, 16), (8, 32), (16, 64)],
            stage_ms: 10.0,
            bytes: 1_000_000,
            microbatch_size: 32,
            islands: vec![1, 4],
            dispatch: DispatchMode::Parallel,
            cost: CostModel::default(),
        }
    }
}

/// Busy fraction of a GPipe forward schedule whose transfers are hidden.
pub fn bubble_oracle(stages: u32, microbatches: u32) -> f64 {
    microbatches as f64 / (microbatches + stages - 1) as f64
}

/// Stage `s` runs on host `s`; microbatch `m` passes through the stages in
/// order. Nodes are traced microbatch-major so every stage sees the
/// microbatches in order.
fn pipeline_program(
    topo: &Topology,
    stages: u32,
    microbatches: u32,
    stage_ns: u64,
    bytes: u64,
) -> Result<Program, BenchError> {
    let mut b = ProgramBuilder::new(topo, ClientId(0));
    let slices: Vec<_> = topo.hosts[..stages as usize]
        .iter()
        .map(|h| b.slice(&h.devices))
        .collect();
    let shards = topo.hosts[0].devices.len() as u32;
    let mut results = Vec::new();
    for _ in 0..microbatches {
        let mut v = b.arg(shards, bytes);
        for (s, slice) in slices.iter().enumerate() {
            let f = CompiledFunction::new(&format!("stage{s}"), shards, stage_ns)
                .with_io(&[bytes], &[bytes])
                .collective(shards > 1);
            v = b.call(f, *slice, &[v])?[0];
        }
        results.push(v);
    }
    Ok(b.finish("pipeline", &results)?)
}

pub(crate) struct PipelineRun {
    pub stages: u32,
    pub microbatches: u32,
    pub islands: u32,
    pub step_ns: u64,
    pub busy_fraction: f64,
    pub audit_ok: bool,
    pub execution: crate::exec::Execution,
}

pub(crate) fn run_one(
    cluster: &ClusterConfig,
    p: &PipelineParams,
    stages: u32,
    microbatches: u32,
    islands: u32,
    record_timeline: bool,
) -> Result<PipelineRun, BenchError> {
    if stages == 0 || microbatches == 0 || islands == 0 || !stages.is_multiple_of(islands) {
        return Err(BenchError::Workload(format!(
            "{stages} stages cannot be split evenly over {islands} islands"
        )));
    }
    let topo: Arc<Topology> = shaped(cluster, islands, stages / islands)?;
    let stage_ns = (p.stage_ms * 1e6).round() as u64;
    let program = Arc::new(pipeline_program(&topo, stages, microbatches, stage_ns, p.bytes)?);
    let cfg = RuntimeConfig {
        cost: p.cost.clone(),
        dispatch: p.dispatch,
        record_timeline,
        event_log: record_timeline,
        ..RuntimeConfig::default()
    };
    let plan = ClientPlan::new(ClientId(0), program.clone(), 1);
    let e = exec::run(&topo, &cfg, vec![plan])?;
    let (start, end) = kernel_window(&e);
    let step_ns = end - start;
    let busy: u64 = e.samples.iter().map(|s| s.end_ns - s.start_ns).sum();
    let devices = topo.devices.len() as f64;
    let busy_fraction = if step_ns == 0 {
        0.0
    } else {
        busy as f64 / (devices * step_ns as f64)
    };
    Ok(PipelineRun {
        stages,
        microbatches,
        islands,
        step_ns,
        busy_fraction,
        audit_ok: audit(&e, program.kernels()),
        execution: e,
    })
}

pub(crate) fn run(cluster: &ClusterConfig, p: &PipelineParams, seed: u64) -> Result<BenchOutput, BenchError> {
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    let mut events = Vec::new();
    for (ci, &(stages, microbatches)) in p.configs.iter().enumerate() {
        let mut single_island_tps = None;
        for (ii, &islands) in p.islands.iter().enumerate() {
            let first = ci == 0 && ii == 0;
            let mut r = run_one(cluster, p, stages, microbatches, islands, first)?;
            if first {
                trace = chrome_trace(&r.execution);
                events = r.execution.event_log.take().unwrap_or_default();
            }
            let oracle = bubble_oracle(stages, microbatches);
            let tokens = r.microbatches as u64 * p.microbatch_size as u64;
            let tps = tokens as f64 * 1e9 / r.step_ns as f64;
            let base = *single_island_tps.get_or_insert(tps);
            rows.push(json!({
                "stages": r.stages,
                "microbatches": r.microbatches,
                "islands": r.islands,
                "step_ns": r.step_ns,
                "busy_fraction": round(r.busy_fraction, 6),
                "oracle": round(oracle, 6),
                "relative_error": round((r.busy_fraction - oracle).abs() / oracle, 6),
                "tokens_per_sec": round(tps, 3),
                "vs_first_split": round(tps / base, 6),
                "audit_ok": r.audit_ok,
            }));
        }
    }
    Ok(BenchOutput {
        results: Results {
            benchmark: "pipeline".into(),
            params: describe(p, seed),
            rows,
        },
        trace,
        events,
    })
}
