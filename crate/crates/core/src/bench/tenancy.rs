use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{audit, busy_by_client, chrome_trace, describe, kernel_window, round, BenchError, BenchOutput, Results};
use crate::exec::{chain, run, ClientPlan, CostModel, Execution, Pacing, RuntimeConfig, SubmitMode};
use crate::hardware::{ClusterConfig, DeviceId, Topology};
use crate::ids::ClientId;
use crate::sched::Policy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TenancyParams {
    pub clients: Vec<u32>,
    /// Device time of each client program.
    pub program_us: u64,
    pub runs_per_client: u32,
    pub bytes: u64,
    /// Client starts are spread uniformly over this many microseconds.
    pub jitter_us: u64,
    /// Emit the trace of the run with this many clients.
    pub trace_clients: u32,
    pub cost: CostModel,
}

impl Default for TenancyParams {
    fn default() -> Self {
        TenancyParams {
            clients: vec![1, 2, 4, 8, 16],
            program_us: 330,
            runs_per_client: 64,
            bytes: 0,
            jitter_us: 100,
            trace_clients: 4,
            cost: CostModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShareParams {
    pub weight_sets: Vec<Vec<u32>>,
    /// Devices (from the first) every gang spans.
    pub devices: u32,
    pub gang_us: u64,
    pub nodes_per_run: usize,
    pub runs: u32,
    /// Gangs the scheduler may have outstanding per device.
    pub window: Option<u32>,
    pub jitter_us: u64,
    pub cost: CostModel,
}

impl Default for ShareParams {
    fn default() -> Self {
        ShareParams {
            weight_sets: vec![vec![1, 2, 4, 8], vec![1, 1, 1, 1]],
            devices: 8,
            gang_us: 100,
            nodes_per_run: 50,
            runs: 120,
            window: Some(2),
            jitter_us: 100,
            cost: CostModel::default(),
        }
    }
}

fn starts(seed: u64, clients: u32, jitter_us: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clients)
        .map(|_| {
            if jitter_us == 0 {
                0
            } else {
                rng.gen_range(0..jitter_us * 1_000)
            }
        })
        .collect()
}

fn shares(busy: &BTreeMap<u32, u64>, clients: u32) -> Vec<f64> {
    let total: u64 = busy.values().sum();
    (0..clients)
        .map(|c| {
            if total == 0 {
                0.0
            } else {
                *busy.get(&c).unwrap_or(&0) as f64 / total as f64
            }
        })
        .collect()
}

pub(crate) struct TenancyRun {
    pub utilization: f64,
    pub shares: Vec<f64>,
    pub audit_ok: bool,
    pub execution: Execution,
}

pub(crate) fn run_clients(
    topo: &Arc<Topology>,
    p: &TenancyParams,
    clients: u32,
    seed: u64,
    record_timeline: bool,
) -> Result<TenancyRun, BenchError> {
    let devices: Vec<DeviceId> = topo.islands[0].devices.clone();
    let program = Arc::new(chain(
        topo,
        "step",
        std::slice::from_ref(&devices),
        1,
        p.program_us * 1_000,
        p.bytes,
    )?);
    let plans = starts(seed, clients, p.jitter_us)
        .into_iter()
        .enumerate()
        .map(|(i, at)| {
            ClientPlan::new(ClientId(i as u32), program.clone(), p.runs_per_client)
                .pacing(Pacing::AwaitResults)
                .start_at(at)
        })
        .collect();
    let cfg = RuntimeConfig {
        cost: p.cost.clone(),
        record_timeline,
        event_log: record_timeline,
        ..RuntimeConfig::default()
    };
    let e = run(topo, &cfg, plans)?;
    let (start, end) = kernel_window(&e);
    let busy = busy_by_client(&e, start, end);
    let total: u64 = busy.values().sum();
    let utilization = if end > start {
        total as f64 / (devices.len() as f64 * (end - start) as f64)
    } else {
        0.0
    };
    let expected = program.kernels() * clients as u64 * p.runs_per_client as u64;
    Ok(TenancyRun {
        utilization,
        shares: shares(&busy, clients),
        audit_ok: audit(&e, expected),
        execution: e,
    })
}

pub(crate) fn run_tenancy(cluster: &ClusterConfig, p: &TenancyParams, seed: u64) -> Result<BenchOutput, BenchError> {
    if p.runs_per_client == 0 || p.clients.contains(&0) {
        return Err(BenchError::Workload(
            "clients and runs_per_client must be positive".into(),
        ));
    }
    let topo = Arc::new(Topology::new(cluster)?);
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    let mut events = Vec::new();
    for &k in &p.clients {
        let traced = k == p.trace_clients;
        let mut r = run_clients(&topo, p, k, seed, traced)?;
        if traced {
            trace = chrome_trace(&r.execution);
            events = r.execution.event_log.take().unwrap_or_default();
        }
        let (start, end) = kernel_window(&r.execution);
        let programs = k as u64 * p.runs_per_client as u64;
        rows.push(json!({
            "clients": k,
            "devices": topo.islands[0].devices.len(),
            "programs": programs,
            "window_ns": end - start,
            "programs_per_sec": round(programs as f64 * 1e9 / (end - start).max(1) as f64, 3),
            "utilization": round(r.utilization, 6),
            "shares": r.shares.iter().map(|s| round(*s, 6)).collect::<Vec<_>>(),
            "audit_ok": r.audit_ok,
        }));
    }
    Ok(BenchOutput {
        results: Results {
            benchmark: "multitenancy".into(),
            params: describe(p, seed),
            rows,
        },
        trace,
        events,
    })
}

pub(crate) struct ShareRun {
    pub shares: Vec<f64>,
    pub gangs: u64,
    pub audit_ok: bool,
}

/// Busy-time shares of clients with `weights`, measured while every client
/// still has work queued, i.e. up to the first client's last kernel.
pub(crate) fn run_weights(
    topo: &Arc<Topology>,
    p: &ShareParams,
    weights: &[u32],
    seed: u64,
) -> Result<ShareRun, BenchError> {
    let n = p.devices as usize;
    let island = &topo.islands[0].devices;
    if n == 0 || n > island.len() {
        return Err(BenchError::Workload(format!(
            "share gangs need 1..={} devices, asked for {n}",
            island.len()
        )));
    }
    if weights.is_empty() || weights.contains(&0) {
        return Err(BenchError::Workload("weights must be positive".into()));
    }
    let devices = island[..n].to_vec();
    let program = Arc::new(chain(topo, "share", &[devices], p.nodes_per_run, p.gang_us * 1_000, 0)?);
    let clients = weights.len() as u32;
    let plans = starts(seed, clients, p.jitter_us)
        .into_iter()
        .enumerate()
        .map(|(i, at)| {
            ClientPlan::new(ClientId(i as u32), program.clone(), p.runs)
                .submit(SubmitMode::Chained)
                .pacing(Pacing::OpenLoop)
                .start_at(at)
        })
        .collect();
    let cfg = RuntimeConfig {
        cost: p.cost.clone(),
        policy: Policy::Proportional {
            weights: weights
                .iter()
                .enumerate()
                .map(|(i, w)| (ClientId(i as u32), *w))
                .collect(),
        },
        window: p.window,
        ..RuntimeConfig::default()
    };
    let e = run(topo, &cfg, plans)?;
    let mut last_end: BTreeMap<u32, u64> = BTreeMap::new();
    for s in &e.samples {
        let v = last_end.entry(s.client).or_default();
        *v = (*v).max(s.end_ns);
    }
    let first_drain = last_end.values().copied().min().unwrap_or(0);
    let (start, _) = kernel_window(&e);
    let busy = busy_by_client(&e, start, first_drain);
    let gangs = p.nodes_per_run as u64 * p.runs as u64 * clients as u64;
    Ok(ShareRun {
        shares: shares(&busy, clients),
        gangs,
        audit_ok: audit(&e, program.kernels() * p.runs as u64 * clients as u64),
    })
}

pub(crate) fn run_share(cluster: &ClusterConfig, p: &ShareParams, seed: u64) -> Result<BenchOutput, BenchError> {
    let topo = Arc::new(Topology::new(cluster)?);
    let mut rows = Vec::new();
    for weights in &p.weight_sets {
        let r = run_weights(&topo, p, weights, seed)?;
        let total: u32 = weights.iter().sum();
        for (i, w) in weights.iter().enumerate() {
            let expected = *w as f64 / total as f64;
            rows.push(json!({
                "weights": weights,
                "client": i,
                "weight": w,
                "gangs": r.gangs,
                "share": round(r.shares[i], 6),
                "expected": round(expected, 6),
                "relative_error": round((r.shares[i] - expected).abs() / expected, 6),
                "audit_ok": r.audit_ok,
            }));
        }
    }
    Ok(BenchOutput {
        results: Results {
            benchmark: "share".into(),
            params: describe(p, seed),
            rows,
        },
        trace: Vec::new(),
        events: Vec::new(),
    })
}
