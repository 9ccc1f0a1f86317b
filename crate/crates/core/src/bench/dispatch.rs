use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{audit, chrome_trace, describe, round, shaped, BenchError, BenchOutput, Results};
use crate::exec::{
    self, chain, fuse, multicontroller_baseline, order_interleavings, ClientPlan, CostModel, GangShape, OrderMode,
    Pacing, Program, ProgramBuilder, RuntimeConfig, SubmitMode,
};
use crate::hardware::{ClusterConfig, DeviceId, Topology};
use crate::ids::ClientId;
use crate::ir::CompiledFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatchParams {
    pub hosts: Vec<u32>,
    pub nodes: usize,
    pub node_us: u64,
    pub runs: u32,
    pub bytes: u64,
    pub cost: CostModel,
}

impl Default for DispatchParams {
    fn default() -> Self {
        DispatchParams {
            hosts: vec![1, 2, 4, 8, 16],
            nodes: 128,
            node_us: 20,
            runs: 32,
            bytes: 4096,
            cost: CostModel::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Mode {
    OpByOp,
    Chained,
    Fused,
}

impl Mode {
    pub(crate) const ALL: [Mode; 3] = [Mode::OpByOp, Mode::Chained, Mode::Fused];

    pub(crate) fn name(self) -> &'static str {
        match self {
            Mode::OpByOp => "opbyop",
            Mode::Chained => "chained",
            Mode::Fused => "fused",
        }
    }
}

/// `nodes` computations over every device of `topo`, or one computation
/// doing all of their work.
pub(crate) fn unit_program(
    topo: &Topology,
    nodes: usize,
    node_ns: u64,
    bytes: u64,
    fused: bool,
) -> Result<Arc<Program>, BenchError> {
    let devices: Vec<DeviceId> = topo.devices.iter().map(|d| d.id).collect();
    let p = chain(topo, "unit", std::slice::from_ref(&devices), nodes, node_ns, bytes)?;
    if !fused {
        return Ok(Arc::new(p));
    }
    let parts: Vec<&CompiledFunction> = p.graph.compute_nodes().filter_map(|n| n.func()).collect();
    let f = fuse("unit_fused", &parts)?;
    let mut b = ProgramBuilder::new(topo, ClientId(0));
    let s = b.slice(&devices);
    let a = b.arg(devices.len() as u32, bytes);
    let v = b.call(f, s, &[a])?[0];
    Ok(Arc::new(b.finish("unit_fused", &[v])?))
}

pub(crate) struct ModeRun {
    pub makespan_ns: u64,
    pub audit_ok: bool,
    pub execution: crate::exec::Execution,
}

pub(crate) fn run_mode(
    topo: &Arc<Topology>,
    cost: &CostModel,
    mode: Mode,
    nodes: usize,
    node_ns: u64,
    bytes: u64,
    runs: u32,
    pacing: Pacing,
    record_timeline: bool,
) -> Result<ModeRun, BenchError> {
    let program = unit_program(topo, nodes, node_ns, bytes, mode == Mode::Fused)?;
    let submit = match mode {
        Mode::OpByOp => SubmitMode::OpByOp,
        _ => SubmitMode::Chained,
    };
    let cfg = RuntimeConfig {
        cost: cost.clone(),
        record_timeline,
        event_log: record_timeline,
        ..RuntimeConfig::default()
    };
    let plan = ClientPlan::new(ClientId(0), program.clone(), runs)
        .submit(submit)
        .pacing(pacing);
    let e = exec::run(topo, &cfg, vec![plan])?;
    let audit_ok = audit(&e, program.kernels() * runs as u64) && e.clients[0].runs_completed == runs;
    Ok(ModeRun {
        makespan_ns: e.last_kernel_end(),
        audit_ok,
        execution: e,
    })
}

pub(crate) fn per_sec(count: u64, ns: u64) -> f64 {
    if ns == 0 {
        f64::INFINITY
    } else {
        count as f64 * 1e9 / ns as f64
    }
}

pub(crate) fn run(cluster: &ClusterConfig, p: &DispatchParams, seed: u64) -> Result<BenchOutput, BenchError> {
    if p.nodes == 0 || p.runs == 0 {
        return Err(BenchError::Workload("nodes and runs must be positive".into()));
    }
    let node_ns = p.node_us * 1_000;
    let computations = p.nodes as u64 * p.runs as u64;
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    let mut events = Vec::new();
    for (hi, &hosts) in p.hosts.iter().enumerate() {
        let topo = shaped(cluster, 1, hosts)?;
        let devices: Vec<DeviceId> = topo.devices.iter().map(|d| d.id).collect();
        let base = multicontroller_baseline(&topo, &devices, computations as u32, node_ns)?;
        rows.push(json!({
            "hosts": hosts,
            "devices": devices.len(),
            "mode": "baseline",
            "computations": computations,
            "makespan_ns": base,
            "computations_per_sec": round(per_sec(computations, base), 3),
            "vs_baseline": 1.0,
            "audit_ok": true,
        }));
        for mode in Mode::ALL {
            let mut r = run_mode(
                &topo,
                &p.cost,
                mode,
                p.nodes,
                node_ns,
                p.bytes,
                p.runs,
                Pacing::OpenLoop,
                hi == 0 && mode == Mode::Chained,
            )?;
            if hi == 0 && mode == Mode::Chained {
                trace = chrome_trace(&r.execution);
                events = r.execution.event_log.take().unwrap_or_default();
            }
            rows.push(json!({
                "hosts": hosts,
                "devices": devices.len(),
                "mode": mode.name(),
                "computations": computations,
                "makespan_ns": r.makespan_ns,
                "computations_per_sec": round(per_sec(computations, r.makespan_ns), 3),
                "vs_baseline": round(base as f64 / r.makespan_ns as f64, 6),
                "audit_ok": r.audit_ok,
            }));
        }
    }
    Ok(BenchOutput {
        results: Results {
            benchmark: "dispatch".into(),
            params: describe(p, seed),
            rows,
        },
        trace,
        events,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeadlockParams {
    /// (devices, gangs) pairs; every device sits on its own host.
    pub cases: Vec<(u32, u32)>,
    pub gang_us: u64,
}

impl Default for DeadlockParams {
    fn default() -> Self {
        DeadlockParams {
            cases: vec![(2, 2), (2, 3), (3, 2), (3, 3)],
            gang_us: 100,
        }
    }
}

/// With two devices every gang spans both; with more, gang `g` spans
/// devices `g` and `g + 1` (mod n), so the gangs form a ring.
pub fn deadlock_gangs(devices: u32, gangs: u32, duration_ns: u64) -> Vec<GangShape> {
    (0..gangs)
        .map(|g| {
            let mut ds = if devices == 2 {
                vec![DeviceId(0), DeviceId(1)]
            } else {
                vec![DeviceId(g % devices), DeviceId((g + 1) % devices)]
            };
            ds.sort();
            GangShape {
                devices: ds,
                duration_ns,
            }
        })
        .collect()
}

pub(crate) fn run_deadlock(cluster: &ClusterConfig, p: &DeadlockParams, seed: u64) -> Result<BenchOutput, BenchError> {
    let mut rows = Vec::new();
    for &(devices, gangs) in &p.cases {
        if !(2..=4).contains(&devices) || !(1..=4).contains(&gangs) {
            return Err(BenchError::Workload(format!(
                "case ({devices}, {gangs}): exhaustive search supports 2-4 devices and 1-4 gangs"
            )));
        }
        let mut one = ClusterConfig::uniform(1, devices, 1);
        one.pcie = cluster.pcie;
        one.dcn = cluster.dcn;
        one.islands[0].ici = cluster.islands[0].ici;
        let topo = Arc::new(Topology::new(&one)?);
        let shapes = deadlock_gangs(devices, gangs, p.gang_us * 1_000);
        for mode in [OrderMode::Independent, OrderMode::Ticketed] {
            let r = order_interleavings(&topo, &shapes, mode);
            rows.push(json!({
                "devices": devices,
                "gangs": gangs,
                "mode": mode,
                "orders": r.orders,
                "deadlocked": r.deadlocked,
                "completed": r.completed,
            }));
        }
    }
    Ok(BenchOutput {
        results: Results {
            benchmark: "deadlock".into(),
            params: describe(p, seed),
            rows,
        },
        trace: Vec::new(),
        events: Vec::new(),
    })
}
