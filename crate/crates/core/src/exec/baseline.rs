use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use super::ExecError;
use crate::hardware::{DeviceId, FabricModel, FabricMsg, HostId, KernelExec, KernelLabel, Topology};
use crate::ids::{ClientId, InstanceId};
use crate::ir::NodeId;
use crate::sched::{Gang, GangScheduler, HostEnqueueGate, Policy, Ticket};
use crate::simcore::{ProcessKind, Simulation};

/// Every host runs its own copy of the program and enqueues step `i` on its
/// local devices as soon as it can, with no central control. Returns the end
/// of the last kernel.
pub fn multicontroller_baseline(
    topo: &Arc<Topology>,
    devices: &[DeviceId],
    steps: u32,
    duration_ns: u64,
) -> Result<u64, ExecError> {
    let mut sim: Simulation<FabricMsg> = Simulation::new();
    let mut model = FabricModel::new(topo.clone(), &mut sim);
    let hosts: BTreeSet<HostId> = devices.iter().map(|d| topo.host_of(*d)).collect();
    let procs: BTreeMap<HostId, _> = hosts
        .iter()
        .map(|h| (*h, sim.add_process(ProcessKind::HostExecutor)))
        .collect();
    let members: Arc<[DeviceId]> = devices.to_vec().into();
    let pcie = topo.pcie.latency_ns;
    for i in 0..steps {
        for (s, d) in devices.iter().enumerate() {
            let mut exec = KernelExec::new(
                KernelLabel {
                    instance: 0,
                    node: i,
                    shard: s as u32,
                },
                duration_ns,
            );
            if devices.len() > 1 {
                exec = exec.collective(i as u64, members.clone());
            }
            let from = procs[&topo.host_of(*d)];
            model
                .fabric
                .submit_kernel(sim.queue(), from, *d, exec, (i as u64 + 1) * pcie)
                .map_err(|e| ExecError::Invalid(e.to_string()))?;
        }
    }
    let out = sim.run_until_quiescent(&mut model);
    if out.status.is_deadlock() {
        return Err(ExecError::Deadlock("multi-controller baseline".into()));
    }
    Ok(model.notices.iter().map(|(t, _)| t.0).max().unwrap_or(0))
}

/// A collective that must run on all of `devices` together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GangShape {
    pub devices: Vec<DeviceId>,
    pub duration_ns: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderMode {
    /// Each host picks its own enqueue order.
    Independent,
    /// One scheduler tickets the gangs; hosts enqueue through the gate
    /// whatever order the grants arrive in.
    Ticketed,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct InterleavingReport {
    pub orders: usize,
    pub deadlocked: usize,
    pub completed: usize,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Cartesian product of one choice per slot.
fn product(choices: &[Vec<Vec<usize>>]) -> Vec<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new()];
    for c in choices {
        let mut next = Vec::new();
        for prefix in &out {
            for pick in c {
                let mut v: Vec<Vec<usize>> = prefix.clone();
                v.push(pick.clone());
                next.push(v);
            }
        }
        out = next;
    }
    out
}

/// Run gangs with the given per-device enqueue orders; true if it deadlocks.
fn deadlocks(topo: &Arc<Topology>, gangs: &[GangShape], orders: &BTreeMap<DeviceId, Vec<usize>>) -> bool {
    let mut sim: Simulation<FabricMsg> = Simulation::new();
    let mut model = FabricModel::new(topo.clone(), &mut sim);
    for (d, order) in orders {
        for &g in order {
            let shape = &gangs[g];
            let shard = shape.devices.iter().position(|x| x == d).unwrap() as u32;
            let exec = KernelExec::new(
                KernelLabel {
                    instance: 0,
                    node: g as u32,
                    shard,
                },
                shape.duration_ns,
            )
            .collective(g as u64, shape.devices.clone().into());
            model.fabric.enqueue_kernel(sim.queue(), *d, exec).unwrap();
        }
    }
    sim.run_until_quiescent(&mut model).status.is_deadlock()
}

fn hosted(topo: &Topology, gangs: &[GangShape]) -> BTreeMap<HostId, Vec<usize>> {
    let mut by_host: BTreeMap<HostId, Vec<usize>> = BTreeMap::new();
    for (i, g) in gangs.iter().enumerate() {
        let hosts: BTreeSet<HostId> = g.devices.iter().map(|d| topo.host_of(*d)).collect();
        for h in hosts {
            by_host.entry(h).or_default().push(i);
        }
    }
    by_host
}

/// Enumerate enqueue interleavings of `gangs` and count deadlocks.
pub fn order_interleavings(topo: &Arc<Topology>, gangs: &[GangShape], mode: OrderMode) -> InterleavingReport {
    let by_host = hosted(topo, gangs);
    let hosts: Vec<HostId> = by_host.keys().copied().collect();
    let mut report = InterleavingReport::default();
    let mut record = |dead: bool| {
        report.orders += 1;
        if dead {
            report.deadlocked += 1;
        } else {
            report.completed += 1;
        }
    };
    let host_perms: Vec<Vec<Vec<usize>>> = hosts
        .iter()
        .map(|h| {
            let local = &by_host[h];
            permutations(local.len())
                .into_iter()
                .map(|p| p.into_iter().map(|i| local[i]).collect())
                .collect()
        })
        .collect();
    match mode {
        OrderMode::Independent => {
            for choice in product(&host_perms) {
                let mut orders: BTreeMap<DeviceId, Vec<usize>> = BTreeMap::new();
                for (hi, h) in hosts.iter().enumerate() {
                    for &g in &choice[hi] {
                        for d in gangs[g].devices.iter().filter(|d| topo.host_of(**d) == *h) {
                            orders.entry(*d).or_default().push(g);
                        }
                    }
                }
                record(deadlocks(topo, gangs, &orders));
            }
        }
        OrderMode::Ticketed => {
            for submit in permutations(gangs.len()) {
                let tickets = ticket(topo, gangs, &submit);
                for arrival in product(&host_perms) {
                    let orders = gate_orders(topo, &hosts, &tickets, &arrival);
                    record(deadlocks(topo, gangs, &orders));
                }
            }
        }
    }
    report
}

fn ticket(topo: &Topology, gangs: &[GangShape], submit: &[usize]) -> BTreeMap<usize, Ticket> {
    let devices: BTreeSet<DeviceId> = gangs.iter().flat_map(|g| g.devices.iter().copied()).collect();
    let mut s = GangScheduler::new(Policy::Fifo, None, devices.into_iter().map(|d| (d, topo.hbm_bytes)));
    for &g in submit {
        s.submit(Gang {
            client: ClientId(g as u32),
            instance: InstanceId(0),
            node: NodeId(g as u32),
            devices: gangs[g].devices.clone(),
            device_time_ns: gangs[g].duration_ns,
            hbm: Vec::new(),
        })
        .unwrap();
    }
    s.next_dispatch()
        .into_iter()
        .map(|t| (t.gang.node.0 as usize, t))
        .collect()
}

/// Per-device enqueue order when grants reach each host in `arrival` order
/// and the host holds each one until the gate admits it.
fn gate_orders(
    topo: &Topology,
    hosts: &[HostId],
    tickets: &BTreeMap<usize, Ticket>,
    arrival: &[Vec<usize>],
) -> BTreeMap<DeviceId, Vec<usize>> {
    let mut orders: BTreeMap<DeviceId, Vec<usize>> = BTreeMap::new();
    for (hi, h) in hosts.iter().enumerate() {
        let local = |d: DeviceId| topo.host_of(d) == *h;
        let mut gate = HostEnqueueGate::default();
        let mut held: Vec<usize> = Vec::new();
        for &g in &arrival[hi] {
            held.push(g);
            while let Some(i) = held.iter().position(|g| gate.ready(&tickets[g], local)) {
                let g = held.remove(i);
                gate.commit(&tickets[&g], local);
                for (d, _) in tickets[&g].positions.iter().filter(|(d, _)| local(*d)) {
                    orders.entry(*d).or_default().push(g);
                }
            }
        }
        debug_assert!(held.is_empty());
    }
    orders
}
