use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::dispatch::{run_mode, Mode};
use super::{describe, round, shaped, BenchError, BenchOutput, Results};
use crate::exec::{multicontroller_baseline, CostModel, Pacing};
use crate::hardware::{ClusterConfig, DeviceId, Topology};
use crate::sweep;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossoverParams {
    pub hosts: Vec<u32>,
    pub nodes: usize,
    /// Throughput ratio (single-controller over baseline) to reach.
    pub target: f64,
    pub resolution_us: u64,
    /// Give up above this computation size.
    pub max_ms: u64,
    pub bytes: u64,
    pub cost: CostModel,
}

impl Default for CrossoverParams {
    fn default() -> Self {
        CrossoverParams {
            hosts: vec![2, 4, 8, 16, 32, 64],
            nodes: 256,
            target: 0.99,
            resolution_us: 1,
            max_ms: 1_000,
            bytes: 0,
            cost: CostModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParityParams {
    pub hosts: Vec<u32>,
    pub nodes: usize,
    /// Computation size as a multiple of the per-node overhead.
    pub overhead_multiple: f64,
    pub bytes: u64,
    pub cost: CostModel,
}

impl Default for ParityParams {
    fn default() -> Self {
        ParityParams {
            hosts: vec![2, 4, 8, 16, 32, 64],
            nodes: 32,
            overhead_multiple: 10.0,
            bytes: 0,
            cost: CostModel::default(),
        }
    }
}

/// Smallest `t` (to within `resolution`) with `ratio(t) >= target`: grow an
/// upper bound geometrically, then bisect. `None` if `max` is not enough.
/// Returns the point, its ratio and how many evaluations it took.
pub fn crossover_point(
    ratio: impl Fn(u64) -> Result<f64, BenchError>,
    target: f64,
    resolution: u64,
    max: u64,
) -> Result<Option<(u64, f64, usize)>, BenchError> {
    let resolution = resolution.max(1);
    let mut evals = 1;
    let r0 = ratio(0)?;
    if r0 >= target {
        return Ok(Some((0, r0, evals)));
    }
    let mut lo = 0;
    let mut hi = resolution;
    let mut r_hi;
    loop {
        evals += 1;
        r_hi = ratio(hi)?;
        if r_hi >= target {
            break;
        }
        if hi >= max {
            return Ok(None);
        }
        lo = hi;
        hi = (hi * 2).min(max);
    }
    while hi - lo > resolution {
        let mid = lo + (hi - lo) / 2;
        evals += 1;
        let r = ratio(mid)?;
        if r >= target {
            hi = mid;
            r_hi = r;
        } else {
            lo = mid;
        }
    }
    Ok(Some((hi, r_hi, evals)))
}

fn all_devices(topo: &Topology) -> Vec<DeviceId> {
    topo.devices.iter().map(|d| d.id).collect()
}

/// Baseline makespan over single-controller makespan for one run of `nodes`
/// computations of `t` ns; 1 when both take no time.
fn ratio(
    topo: &Arc<Topology>,
    cost: &CostModel,
    mode: Mode,
    pacing: Pacing,
    nodes: usize,
    t: u64,
    bytes: u64,
) -> Result<f64, BenchError> {
    let base = multicontroller_baseline(topo, &all_devices(topo), nodes as u32, t)?;
    let sc = run_mode(topo, cost, mode, nodes, t, bytes, 1, pacing, false)?;
    if !sc.audit_ok {
        return Err(BenchError::Workload("single-controller run failed its audit".into()));
    }
    Ok(if sc.makespan_ns == 0 {
        if base == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        base as f64 / sc.makespan_ns as f64
    })
}

/// Control-plane and link cost one op-by-op computation pays on `hosts`
/// hosts: client round trip, scheduling and fan-out, host preparation,
/// the PCIe enqueue and one DCN hop to the hosts.
pub fn per_node_overhead_ns(topo: &Topology, cost: &CostModel, hosts: u32) -> u64 {
    2 * cost.client_rpc_ns
        + cost.decision_ns
        + cost.fanout_ns_per_host * hosts as u64
        + cost.host_prep_ns
        + topo.pcie.latency_ns
        + topo.dcn.latency_ns
}

pub(crate) fn run_crossover(
    cluster: &ClusterConfig,
    p: &CrossoverParams,
    seed: u64,
) -> Result<BenchOutput, BenchError> {
    if p.nodes == 0 || !(p.target > 0.0) {
        return Err(BenchError::Workload("nodes and target must be positive".into()));
    }
    let found = sweep::map(&p.hosts, |&hosts| -> Result<_, BenchError> {
        let topo = shaped(cluster, 1, hosts)?;
        let point = crossover_point(
            |t| ratio(&topo, &p.cost, Mode::OpByOp, Pacing::AwaitAck, p.nodes, t, p.bytes),
            p.target,
            p.resolution_us * 1_000,
            p.max_ms * 1_000_000,
        )?;
        Ok((hosts, topo.devices.len(), point))
    });
    let mut rows = Vec::new();
    for r in found {
        let (hosts, devices, point) = r?;
        rows.push(match point {
            Some((t, achieved, evals)) => json!({
                "hosts": hosts,
                "devices": devices,
                "finite": true,
                "crossover_ns": t,
                "crossover_ms": round(t as f64 / 1e6, 6),
                "ratio": round(achieved, 6),
                "evaluations": evals,
            }),
            None => json!({
                "hosts": hosts,
                "devices": devices,
                "finite": false,
                "crossover_ns": null,
                "crossover_ms": null,
                "ratio": null,
                "evaluations": null,
            }),
        });
    }
    Ok(BenchOutput {
        results: Results {
            benchmark: "crossover".into(),
            params: describe(p, seed),
            rows,
        },
        trace: Vec::new(),
        events: Vec::new(),
    })
}

pub(crate) fn run_parity(cluster: &ClusterConfig, p: &ParityParams, seed: u64) -> Result<BenchOutput, BenchError> {
    if p.nodes == 0 {
        return Err(BenchError::Workload("nodes must be positive".into()));
    }
    let found = sweep::map(&p.hosts, |&hosts| -> Result<_, BenchError> {
        let topo = shaped(cluster, 1, hosts)?;
        let overhead = per_node_overhead_ns(&topo, &p.cost, hosts);
        let t = (overhead as f64 * p.overhead_multiple).round() as u64;
        let mut out = Vec::new();
        for (mode, pacing) in [(Mode::OpByOp, Pacing::AwaitAck), (Mode::Chained, Pacing::AwaitResults)] {
            let r = ratio(&topo, &p.cost, mode, pacing, p.nodes, t, p.bytes)?;
            out.push(json!({
                "hosts": hosts,
                "devices": topo.devices.len(),
                "mode": mode.name(),
                "overhead_ns": overhead,
                "t_ns": t,
                "ratio": round(r, 6),
            }));
        }
        Ok(out)
    });
    let mut rows = Vec::new();
    for r in found {
        rows.extend(r?);
    }
    Ok(BenchOutput {
        results: Results {
            benchmark: "parity".into(),
            params: describe(p, seed),
            rows,
        },
        trace: Vec::new(),
        events: Vec::new(),
    })
}
