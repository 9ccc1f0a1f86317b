use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use super::program::{arg_digest, node_digest, Program};
use super::{ClientPlan, DispatchMode, ExecError, Pacing, RuntimeConfig, SubmitMode};
use crate::coord::{Coordinator, DataTuple, Enqueued, MessageBatcher, Punctuation, ShardReady};
use crate::hardware::{
    AllocOutcome, BufferId, DeviceId, Fabric, FabricMsg, FabricNotice, HostId, IslandId, KernelExec, KernelId,
    KernelLabel, KernelRecord, Topology, TransferRecord,
};
use crate::ids::{ClientId, InstanceId, OwnerLabel};
use crate::ir::{EdgeId, NodeId};
use crate::sched::{Gang, GangId, GangScheduler, HostEnqueueGate, Ticket};
use crate::simcore::{
    BlockedProcess, EventQueue, LogEntry, LogSummary, Model, Payload, ProcessId, ProcessKind, RunOutcome, SimEvent,
    Simulation, VirtualTime,
};
use crate::store::{double_frees, ObjectHandle, ObjectStore, ShardHandle, ShardLocation};

/// Non-critical host-to-scheduler notifications; these are batched.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Report {
    KernelDone(DeviceId),
    HbmFree(DeviceId, u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum RtMsg {
    Fabric(FabricMsg),
    ClientStart,
    /// Retry a run that was waiting for argument memory.
    ClientRetry,
    ClientFail,
    Submit {
        client: usize,
        sub: u64,
        instance: InstanceId,
        nodes: Vec<NodeId>,
    },
    SchedWake,
    Grant {
        instance: InstanceId,
        node: NodeId,
        seq: u64,
        positions: Vec<(DeviceId, u64)>,
    },
    EnqueueAck {
        sub: u64,
    },
    PrepDone {
        instance: InstanceId,
        node: NodeId,
    },
    Future {
        instance: InstanceId,
        node: NodeId,
        from: HostId,
    },
    Address {
        instance: InstanceId,
        edge: EdgeId,
        consumer: HostId,
    },
    Reports(Vec<Report>),
    BatchTimer {
        token: u64,
    },
    NodeComplete {
        instance: InstanceId,
        node: NodeId,
        digest: u64,
        result: Option<(HostId, ObjectHandle, u32)>,
    },
}

impl Payload for RtMsg {
    fn kind(&self) -> &'static str {
        match self {
            RtMsg::Fabric(m) => m.kind(),
            RtMsg::ClientStart => "client_start",
            RtMsg::ClientRetry => "client_retry",
            RtMsg::ClientFail => "client_fail",
            RtMsg::Submit { .. } => "submit",
            RtMsg::SchedWake => "sched_wake",
            RtMsg::Grant { .. } => "grant",
            RtMsg::EnqueueAck { .. } => "enqueue_ack",
            RtMsg::PrepDone { .. } => "prep_done",
            RtMsg::Future { .. } => "future",
            RtMsg::Address { .. } => "address",
            RtMsg::Reports(_) => "reports",
            RtMsg::BatchTimer { .. } => "batch_timer",
            RtMsg::NodeComplete { .. } => "node_complete",
        }
    }
}

impl From<FabricMsg> for RtMsg {
    fn from(m: FabricMsg) -> Self {
        RtMsg::Fabric(m)
    }
}

/// One finished kernel, attributed to a client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct KernelSample {
    pub client: u32,
    pub device: u32,
    pub instance: u64,
    pub node: u32,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PrepSpan {
    pub host: u32,
    pub start_ns: u64,
    pub end_ns: u64,
    pub instance: u64,
    pub node: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SchedSpan {
    pub island: u32,
    pub start_ns: u64,
    pub end_ns: u64,
    pub instance: u64,
    pub node: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClientReport {
    pub client: ClientId,
    pub runs_completed: u32,
    pub failed: bool,
    pub run_spans: Vec<(u64, u64)>,
    /// Result digests of the last completed run, in result order.
    pub last_digests: Vec<u64>,
}

/// Memory accounting after shutdown.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Hygiene {
    pub allocated_bytes: u64,
    pub ledger_bytes: u64,
    pub live_objects: usize,
    pub fabric_double_frees: usize,
    pub store_double_frees: usize,
    pub store_errors: u64,
    pub refcount_ops: u64,
}

impl Hygiene {
    pub fn clean(&self) -> bool {
        self.allocated_bytes == 0
            && self.ledger_bytes == 0
            && self.live_objects == 0
            && self.fabric_double_frees == 0
            && self.store_double_frees == 0
            && self.store_errors == 0
    }
}

pub struct Execution {
    pub outcome: RunOutcome,
    pub clients: Vec<ClientReport>,
    pub samples: Vec<KernelSample>,
    pub kernel_records: Vec<KernelRecord>,
    pub transfer_records: Vec<TransferRecord>,
    pub prep_spans: Vec<PrepSpan>,
    pub sched_spans: Vec<SchedSpan>,
    pub busy_ns: Vec<u64>,
    pub hygiene: Hygiene,
    pub summary: LogSummary,
    pub event_log: Option<Vec<LogEntry>>,
    pub topology: Arc<Topology>,
}

impl Execution {
    pub fn end_ns(&self) -> u64 {
        self.outcome.clock.0
    }

    /// Last kernel end over all devices.
    pub fn last_kernel_end(&self) -> u64 {
        self.samples.iter().map(|s| s.end_ns).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Client(usize),
    Sched(usize),
    Host(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Unsubmitted,
    Queued,
    Ticketed,
    Done,
    Abandoned,
}

struct NodeRt {
    phase: Phase,
    done: Vec<bool>,
    done_count: usize,
    kernels: Vec<Option<KernelId>>,
    ready: Vec<bool>,
    staging: Vec<Option<BufferId>>,
    result_live: u32,
}

struct InstanceRt {
    client: usize,
    program: Arc<Program>,
    nodes: BTreeMap<NodeId, NodeRt>,
    outputs: BTreeMap<NodeId, (HostId, ObjectHandle)>,
    pending_release: BTreeMap<NodeId, u32>,
    digests: BTreeMap<NodeId, u64>,
    futures: BTreeSet<(NodeId, HostId, HostId)>,
    addresses: BTreeSet<(EdgeId, HostId, HostId)>,
    punctuated: BTreeSet<(EdgeId, u32)>,
    remaining: usize,
}

struct Unit {
    nodes: Vec<NodeId>,
    /// Wait until everything submitted so far in this run has completed.
    barrier: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Wait {
    Nothing,
    Ack(u64),
    RunDone(InstanceId),
    Drained(InstanceId),
}

struct RunRt {
    index: u32,
    start: u64,
    submitted: usize,
    done: usize,
    total: usize,
    digests: BTreeMap<NodeId, u64>,
    results: Vec<(HostId, ObjectHandle, u32)>,
}

struct ClientRt {
    plan: ClientPlan,
    proc: ProcessId,
    coord: Coordinator,
    units: Vec<Unit>,
    result_producers: Vec<NodeId>,
    next_run: u32,
    next_unit: usize,
    current: Option<InstanceId>,
    wait: Wait,
    failed: bool,
    retry_armed: bool,
    acks_pending: BTreeMap<u64, usize>,
    runs: BTreeMap<InstanceId, RunRt>,
    held: Vec<(HostId, ObjectHandle, u32)>,
    report: ClientReport,
}

struct SchedRt {
    island: IslandId,
    proc: ProcessId,
    sched: GangScheduler,
    cpu_free_at: VirtualTime,
    wake_at: Option<VirtualTime>,
    gangs: BTreeMap<GangId, (usize, u64)>,
    sub_left: BTreeMap<(usize, u64), usize>,
}

struct HostRt {
    id: HostId,
    proc: ProcessId,
    sched_proc: ProcessId,
    grants: VecDeque<(InstanceId, NodeId, Vec<(DeviceId, u64)>)>,
    busy: bool,
    prep_start: u64,
    gate: HostEnqueueGate,
    store: ObjectStore,
    batcher: MessageBatcher<IslandId, Report>,
}

struct XferCtx {
    instance: InstanceId,
    edge: EdgeId,
    src: u32,
    dst: u32,
}

pub(crate) struct Runtime {
    topo: Arc<Topology>,
    cfg: RuntimeConfig,
    fabric: Fabric,
    roles: BTreeMap<ProcessId, Role>,
    clients: Vec<ClientRt>,
    scheds: Vec<SchedRt>,
    hosts: Vec<HostRt>,
    instances: BTreeMap<InstanceId, InstanceRt>,
    next_instance: u64,
    next_sub: u64,
    transfers: BTreeMap<u64, XferCtx>,
    next_token: u64,
    samples: Vec<KernelSample>,
    prep_spans: Vec<PrepSpan>,
    sched_spans: Vec<SchedSpan>,
    store_errors: u64,
    fabric_errors: u64,
    pending_client_releases: Vec<(HostId, ObjectHandle, u32)>,
    /// Reports pushed by hosts and not yet applied by a scheduler.
    reports_outstanding: usize,
    /// Set once the simulation has drained; reports are applied in place.
    closing: bool,
    error: Option<ExecError>,
}

/// Run client plans to quiescence, shut down, and audit memory.
pub fn execute(topo: Arc<Topology>, cfg: RuntimeConfig, plans: Vec<ClientPlan>) -> Result<Execution, ExecError> {
    let mut sim: Simulation<RtMsg> = Simulation::new();
    if cfg.event_log {
        sim = sim.with_event_log();
    }
    let mut rt = Runtime::new(topo.clone(), cfg, plans, &mut sim)?;
    let outcome = sim.run_until_quiescent(&mut rt);
    if let Some(e) = rt.error.take() {
        return Err(e);
    }
    if let crate::simcore::RunStatus::Deadlock { blocked } = &outcome.status {
        let reasons: Vec<String> = blocked.iter().map(|b| b.reason.clone()).collect();
        return Err(ExecError::Deadlock(reasons.join("; ")));
    }
    rt.shutdown(sim.queue());
    let hygiene = rt.hygiene();
    let busy_ns = (0..topo.devices.len())
        .map(|d| rt.fabric.busy_ns(DeviceId(d as u32)))
        .collect();
    Ok(Execution {
        clients: rt.clients.iter().map(|c| c.report.clone()).collect(),
        samples: std::mem::take(&mut rt.samples),
        kernel_records: rt.fabric.kernel_records().to_vec(),
        transfer_records: rt.fabric.transfer_records().to_vec(),
        prep_spans: std::mem::take(&mut rt.prep_spans),
        sched_spans: std::mem::take(&mut rt.sched_spans),
        busy_ns,
        hygiene,
        summary: sim.summary().clone(),
        event_log: sim.take_log(),
        outcome,
        topology: topo,
    })
}

fn units_for(program: &Program, mode: SubmitMode) -> Vec<Unit> {
    let mut out = Vec::new();
    let mut prev_irregular = false;
    for seg in program.segments() {
        match mode {
            SubmitMode::Chained => out.push(Unit {
                nodes: seg.nodes.clone(),
                barrier: prev_irregular,
            }),
            SubmitMode::OpByOp => {
                for (i, n) in seg.nodes.iter().enumerate() {
                    out.push(Unit {
                        nodes: vec![*n],
                        barrier: i == 0 && prev_irregular,
                    });
                }
            }
        }
        prev_irregular = !seg.parallel;
    }
    out
}

impl Runtime {
    fn new(
        topo: Arc<Topology>,
        cfg: RuntimeConfig,
        plans: Vec<ClientPlan>,
        sim: &mut Simulation<RtMsg>,
    ) -> Result<Self, ExecError> {
        let mut fabric = Fabric::new(topo.clone(), sim);
        if cfg.record_timeline {
            fabric.record_timeline();
        }
        let mut roles = BTreeMap::new();
        let mut scheds = Vec::new();
        for island in &topo.islands {
            let proc = sim.add_process(ProcessKind::Scheduler);
            roles.insert(proc, Role::Sched(scheds.len()));
            scheds.push(SchedRt {
                island: island.id,
                proc,
                sched: GangScheduler::new(
                    cfg.policy.clone(),
                    cfg.window,
                    island.devices.iter().map(|d| (*d, topo.hbm_bytes)),
                ),
                cpu_free_at: VirtualTime::ZERO,
                wake_at: None,
                gangs: BTreeMap::new(),
                sub_left: BTreeMap::new(),
            });
        }
        let mut hosts = Vec::new();
        for h in &topo.hosts {
            let proc = sim.add_process(ProcessKind::HostExecutor);
            roles.insert(proc, Role::Host(hosts.len()));
            hosts.push(HostRt {
                id: h.id,
                proc,
                sched_proc: scheds[h.island.0 as usize].proc,
                grants: VecDeque::new(),
                busy: false,
                prep_start: 0,
                gate: HostEnqueueGate::default(),
                store: ObjectStore::new(h.id),
                batcher: MessageBatcher::new(cfg.cost.batch),
            });
        }
        let mut clients = Vec::new();
        for plan in plans {
            let program = plan.program.clone();
            for (d, bytes) in program.footprint() {
                if bytes > topo.hbm_bytes {
                    return Err(ExecError::Capacity(format!(
                        "`{}` needs {bytes} bytes on device {}, capacity {}",
                        program.name, d.0, topo.hbm_bytes
                    )));
                }
            }
            let coord =
                Coordinator::new(program.graph.clone(), &topo).map_err(|e| ExecError::Invalid(e.to_string()))?;
            let proc = sim.add_process(ProcessKind::Client);
            roles.insert(proc, Role::Client(clients.len()));
            sim.schedule(VirtualTime(plan.start_ns), proc, RtMsg::ClientStart);
            if let Some(t) = plan.fail_at_ns {
                sim.schedule(VirtualTime(t), proc, RtMsg::ClientFail);
            }
            let result_producers = program
                .graph
                .results
                .iter()
                .map(|r| program.graph.inputs_of(*r).next().unwrap().src)
                .collect();
            clients.push(ClientRt {
                units: units_for(&program, plan.submit),
                report: ClientReport {
                    client: plan.client,
                    runs_completed: 0,
                    failed: false,
                    run_spans: Vec::new(),
                    last_digests: Vec::new(),
                },
                plan,
                proc,
                coord,
                result_producers,
                next_run: 0,
                next_unit: 0,
                current: None,
                wait: Wait::Nothing,
                failed: false,
                retry_armed: false,
                acks_pending: BTreeMap::new(),
                runs: BTreeMap::new(),
                held: Vec::new(),
            });
        }
        Ok(Runtime {
            topo,
            cfg,
            fabric,
            roles,
            clients,
            scheds,
            hosts,
            instances: BTreeMap::new(),
            next_instance: 0,
            next_sub: 0,
            transfers: BTreeMap::new(),
            next_token: 0,
            samples: Vec::new(),
            prep_spans: Vec::new(),
            sched_spans: Vec::new(),
            store_errors: 0,
            fabric_errors: 0,
            pending_client_releases: Vec::new(),
            reports_outstanding: 0,
            closing: false,
            error: None,
        })
    }

    fn fail(&mut self, e: ExecError) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    fn ctrl(&self) -> u64 {
        self.topo.dcn.latency_ns
    }

    fn host_index(&self, h: HostId) -> usize {
        h.0 as usize
    }

    // ---- memory ----

    fn report(&mut self, q: &mut EventQueue<RtMsg>, host: usize, r: Report) {
        let island = self.topo.host_island(self.hosts[host].id);
        let now = q.now();
        self.reports_outstanding += 1;
        match self.hosts[host].batcher.push(now, island, r) {
            Enqueued::Flush(batch) if self.closing => self.apply_reports(island.0 as usize, batch),
            Enqueued::Flush(batch) => {
                let h = &self.hosts[host];
                q.send(h.proc, h.sched_proc, self.topo.dcn.latency_ns, RtMsg::Reports(batch));
            }
            Enqueued::Armed { deadline, token } => {
                q.schedule(deadline, self.hosts[host].proc, RtMsg::BatchTimer { token });
            }
            Enqueued::Queued => {}
        }
    }

    fn free_buffer(&mut self, q: &mut EventQueue<RtMsg>, device: DeviceId, buffer: BufferId, bytes: u64) {
        if self.fabric.free_hbm(q.now(), device, buffer).is_err() {
            self.fabric_errors += 1;
            return;
        }
        let host = self.host_index(self.topo.host_of(device));
        self.report(q, host, Report::HbmFree(device, bytes));
    }

    fn free_shards(&mut self, q: &mut EventQueue<RtMsg>, shards: Vec<ShardHandle>) {
        for s in shards {
            if let ShardLocation::Device { device, buffer } = s.location {
                self.free_buffer(q, device, buffer, s.bytes);
            }
        }
    }

    fn release_handle(&mut self, q: &mut EventQueue<RtMsg>, home: HostId, h: ObjectHandle, times: u32) {
        for _ in 0..times {
            match self.hosts[home.0 as usize].store.release(h, q.now()) {
                Ok(Some(shards)) => self.free_shards(q, shards),
                Ok(None) => {}
                Err(_) => self.store_errors += 1,
            }
        }
    }

    /// Drop one consumer reference on a node's output.
    fn release_output(&mut self, q: &mut EventQueue<RtMsg>, inst: InstanceId, node: NodeId) {
        let i = self.instances.get_mut(&inst).unwrap();
        match i.outputs.get(&node).copied() {
            Some((home, h)) => self.release_handle(q, home, h, 1),
            None => *i.pending_release.entry(node).or_default() += 1,
        }
    }

    fn alloc(&mut self, device: DeviceId, bytes: u64, inst: InstanceId) -> Option<BufferId> {
        match self.fabric.alloc_hbm(device, bytes, OwnerLabel::Instance(inst)) {
            Ok(AllocOutcome::Granted(b)) => Some(b),
            Ok(AllocOutcome::WouldBlock(_)) => {
                self.fail(ExecError::Capacity(format!(
                    "device {} memory disagrees with the scheduler ledger",
                    device.0
                )));
                None
            }
            Err(e) => {
                self.fail(ExecError::Capacity(e.to_string()));
                None
            }
        }
    }

    // ---- clients ----

    fn wait_satisfied(&self, c: usize) -> bool {
        let cl = &self.clients[c];
        match cl.wait {
            Wait::Nothing => true,
            Wait::Ack(sub) => !cl.acks_pending.contains_key(&sub),
            Wait::RunDone(i) => !cl.runs.contains_key(&i),
            Wait::Drained(i) => cl.runs.get(&i).is_none_or(|r| r.done == r.submitted),
        }
    }

    /// Admit a run only once its whole footprint fits, and reserve it. If
    /// it does not fit, retry later while anything else is live; a run that
    /// can never fit is a capacity error.
    fn admit(&mut self, q: &mut EventQueue<RtMsg>, c: usize) -> bool {
        let program = self.clients[c].plan.program.clone();
        let need = program.footprint();
        let island = |d: &DeviceId| self.topo.island_of(*d).0 as usize;
        let fits = need.iter().all(|(d, b)| {
            let s = &self.scheds[island(d)].sched;
            s.used(*d) + b <= s.capacity(*d)
        });
        if fits {
            for (d, b) in &need {
                let i = island(d);
                self.scheds[i].sched.reserve(*d, *b).expect("checked above");
            }
            return true;
        }
        if self.instances.is_empty() && self.reports_outstanding == 0 {
            self.fail(ExecError::Capacity(format!(
                "`{}` does not fit beside the results still held",
                program.name
            )));
        } else if !self.clients[c].retry_armed {
            self.clients[c].retry_armed = true;
            q.schedule_in(
                self.cfg.cost.batch.max_delay_ns.max(1),
                self.clients[c].proc,
                RtMsg::ClientRetry,
            );
        }
        false
    }

    fn create_instance(&mut self, q: &mut EventQueue<RtMsg>, c: usize) -> Option<InstanceId> {
        if !self.admit(q, c) {
            return None;
        }
        let id = InstanceId(self.next_instance);
        self.next_instance += 1;
        let program = self.clients[c].plan.program.clone();
        if let Err(e) = self.clients[c].coord.instantiate(id) {
            self.fail(ExecError::Invalid(e.to_string()));
            return None;
        }
        let nodes = program
            .info
            .iter()
            .map(|(n, info)| {
                let k = info.devices.len();
                (
                    *n,
                    NodeRt {
                        phase: Phase::Unsubmitted,
                        done: vec![false; k],
                        done_count: 0,
                        kernels: vec![None; k],
                        ready: vec![info.in_edges.is_empty() && info.arg_edges.is_empty(); k],
                        staging: vec![None; k],
                        result_live: 0,
                    },
                )
            })
            .collect();
        self.instances.insert(
            id,
            InstanceRt {
                client: c,
                program: program.clone(),
                nodes,
                outputs: BTreeMap::new(),
                pending_release: BTreeMap::new(),
                digests: BTreeMap::new(),
                futures: BTreeSet::new(),
                addresses: BTreeSet::new(),
                punctuated: BTreeSet::new(),
                remaining: program.info.len(),
            },
        );
        // Client arguments are placed on their devices when the run starts.
        for (ai, &a) in program.args.iter().enumerate() {
            let node = program.graph.node(a);
            let crate::ir::NodeKind::Arg { bytes, .. } = node.kind else {
                unreachable!()
            };
            let mut shards = Vec::new();
            for &d in &node.devices {
                let b = self.alloc(d, bytes, id)?;
                shards.push(ShardHandle::device(d, b, bytes));
            }
            let home = self.topo.host_of(node.devices[0]);
            let consumers = program
                .graph
                .outputs_of(a)
                .filter(|e| program.graph.node(e.dst).is_compute())
                .count() as u32;
            let h = self.hosts[home.0 as usize].store.put(shards, OwnerLabel::Instance(id));
            for _ in 1..consumers {
                self.hosts[home.0 as usize].store.add_ref(h).ok();
            }
            let inst = self.instances.get_mut(&id).unwrap();
            inst.outputs.insert(a, (home, h));
            inst.digests.insert(a, arg_digest(ai));
            if consumers == 0 {
                self.release_handle(q, home, h, 1);
            }
        }
        for &a in &program.args {
            let edges: Vec<_> = program.graph.outputs_of(a).map(|e| e.id).collect();
            for e in edges {
                if !program.graph.node(program.graph.edge(e).dst).is_compute() {
                    continue;
                }
                let pairs = program.graph.edge(e).reshard.as_ref().unwrap().pairs.clone();
                for p in pairs {
                    self.deliver(q, id, e, p.src, p.dst);
                }
            }
        }
        let index = self.clients[c].next_run;
        self.clients[c].runs.insert(
            id,
            RunRt {
                index,
                start: q.now().0,
                submitted: 0,
                done: 0,
                total: program.info.len(),
                digests: BTreeMap::new(),
                results: Vec::new(),
            },
        );
        if program.info.is_empty() {
            self.finish_run(c, id, q.now().0);
        }
        Some(id)
    }

    fn client_advance(&mut self, q: &mut EventQueue<RtMsg>, c: usize) {
        loop {
            if self.error.is_some() {
                return;
            }
            let cl = &self.clients[c];
            if cl.failed || cl.next_run >= cl.plan.runs {
                return;
            }
            if !self.wait_satisfied(c) {
                return;
            }
            let inst = if self.clients[c].next_unit == 0 {
                let Some(id) = self.create_instance(q, c) else {
                    return;
                };
                self.clients[c].current = Some(id);
                id
            } else {
                self.clients[c].current.unwrap()
            };
            let cl = &self.clients[c];
            let unit = &cl.units[cl.next_unit];
            let nodes = unit.nodes.clone();
            let sub = self.next_sub;
            self.next_sub += 1;
            let program = cl.plan.program.clone();
            let mut by_island: BTreeMap<IslandId, Vec<NodeId>> = BTreeMap::new();
            for n in &nodes {
                by_island.entry(program.info[n].island).or_default().push(*n);
            }
            let rpc = self.cfg.cost.client_rpc_ns;
            let proc = self.clients[c].proc;
            for (island, ns) in &by_island {
                q.send(
                    proc,
                    self.scheds[island.0 as usize].proc,
                    rpc,
                    RtMsg::Submit {
                        client: c,
                        sub,
                        instance: inst,
                        nodes: ns.clone(),
                    },
                );
            }
            let cl = &mut self.clients[c];
            cl.acks_pending.insert(sub, by_island.len());
            if let Some(r) = cl.runs.get_mut(&inst) {
                r.submitted += nodes.len();
            }
            cl.next_unit += 1;
            if cl.next_unit < cl.units.len() {
                cl.wait = if cl.units[cl.next_unit].barrier {
                    Wait::Drained(inst)
                } else if cl.plan.submit == SubmitMode::OpByOp {
                    Wait::Ack(sub)
                } else {
                    Wait::Nothing
                };
            } else {
                cl.next_unit = 0;
                cl.next_run += 1;
                cl.wait = match (cl.plan.pacing, cl.plan.submit) {
                    (Pacing::AwaitResults, _) => Wait::RunDone(inst),
                    (Pacing::AwaitAck, _) | (Pacing::OpenLoop, SubmitMode::OpByOp) => Wait::Ack(sub),
                    (Pacing::OpenLoop, SubmitMode::Chained) => Wait::Nothing,
                };
            }
        }
    }

    fn finish_run(&mut self, c: usize, inst: InstanceId, now: u64) {
        let cl = &mut self.clients[c];
        let Some(run) = cl.runs.remove(&inst) else {
            return;
        };
        cl.report.runs_completed += 1;
        cl.report.run_spans.push((run.start, now));
        cl.report.last_digests = cl
            .result_producers
            .iter()
            .map(|p| run.digests.get(p).copied().unwrap_or(0))
            .collect();
        let _ = run.index;
        // Keep only the latest results.
        let old = std::mem::replace(&mut cl.held, run.results);
        self.pending_client_releases.extend(old);
    }

    fn client_failed(&mut self, q: &mut EventQueue<RtMsg>, c: usize) {
        if self.clients[c].failed {
            return;
        }
        self.clients[c].failed = true;
        self.clients[c].report.failed = true;
        let client_id = self.clients[c].plan.client;
        for s in 0..self.scheds.len() {
            let cancelled = self.scheds[s].sched.cancel_client(client_id);
            for g in cancelled {
                self.abandon(q, g.instance, g.node);
            }
        }
        let live: Vec<InstanceId> = self
            .instances
            .iter()
            .filter(|(_, i)| i.client == c)
            .map(|(id, _)| *id)
            .collect();
        for inst in live {
            let nodes: Vec<NodeId> = self.instances[&inst]
                .nodes
                .iter()
                .filter(|(_, n)| n.phase == Phase::Unsubmitted)
                .map(|(id, _)| *id)
                .collect();
            for n in nodes {
                self.abandon(q, inst, n);
            }
        }
        let held = std::mem::take(&mut self.clients[c].held);
        let pending: Vec<_> = std::mem::take(&mut self.clients[c].runs)
            .into_values()
            .flat_map(|r| r.results)
            .collect();
        for (home, h, refs) in held.into_iter().chain(pending) {
            self.release_handle(q, home, h, refs);
        }
    }

    /// A node that will never run gives up the references it holds.
    fn abandon(&mut self, q: &mut EventQueue<RtMsg>, inst: InstanceId, node: NodeId) {
        let Some(i) = self.instances.get_mut(&inst) else {
            return;
        };
        let n = i.nodes.get_mut(&node).unwrap();
        if !matches!(n.phase, Phase::Unsubmitted | Phase::Queued) {
            return;
        }
        n.phase = Phase::Abandoned;
        let program = i.program.clone();
        let info = &program.info[&node];
        // Its buffers were reserved at admission but will never exist.
        for (d, b) in info.hbm_need() {
            let s = self.topo.island_of(d).0 as usize;
            self.scheds[s].sched.release_hbm(d, b);
        }
        for e in info.in_edges.iter().chain(&info.arg_edges) {
            let src = program.graph.edge(*e).src;
            self.release_output(q, inst, src);
        }
        self.node_retired(inst);
    }

    fn node_retired(&mut self, inst: InstanceId) {
        let i = self.instances.get_mut(&inst).unwrap();
        i.remaining -= 1;
        if i.remaining == 0 {
            let c = i.client;
            self.clients[c].coord.retire(inst);
            self.instances.remove(&inst);
        }
    }

    // ---- scheduler ----

    fn sched_pump(&mut self, q: &mut EventQueue<RtMsg>, s: usize) {
        let now = q.now();
        if self.scheds[s].cpu_free_at > now {
            let at = self.scheds[s].cpu_free_at;
            if self.scheds[s].wake_at != Some(at) {
                self.scheds[s].wake_at = Some(at);
                q.schedule(at, self.scheds[s].proc, RtMsg::SchedWake);
            }
            return;
        }
        let tickets = self.scheds[s].sched.next_dispatch();
        if tickets.is_empty() {
            return;
        }
        let cost = self.cfg.cost.clone();
        let mut offset = 0u64;
        for t in tickets {
            let spent = self.issue_grants(q, s, &t, offset, &cost);
            offset += spent;
        }
        let at = now + offset;
        self.scheds[s].cpu_free_at = at;
        if offset > 0 {
            self.scheds[s].wake_at = Some(at);
            q.schedule(at, self.scheds[s].proc, RtMsg::SchedWake);
        }
    }

    fn issue_grants(
        &mut self,
        q: &mut EventQueue<RtMsg>,
        s: usize,
        t: &Ticket,
        offset: u64,
        cost: &super::CostModel,
    ) -> u64 {
        let inst = t.gang.instance;
        let node = t.gang.node;
        let Some(i) = self.instances.get_mut(&inst) else {
            return 0;
        };
        i.nodes.get_mut(&node).unwrap().phase = Phase::Ticketed;
        let program = i.program.clone();
        let info = &program.info[&node];
        let hosts = info.hosts.clone();
        let spent = cost.decision_ns + cost.fanout_ns_per_host * hosts.len() as u64;
        let sproc = self.scheds[s].proc;
        for (j, h) in hosts.iter().enumerate() {
            let positions: Vec<(DeviceId, u64)> = t
                .positions
                .iter()
                .filter(|(d, _)| self.topo.host_of(*d) == *h)
                .copied()
                .collect();
            let delay = offset + cost.decision_ns + cost.fanout_ns_per_host * (j as u64 + 1) + self.ctrl();
            q.send(
                sproc,
                self.hosts[h.0 as usize].proc,
                delay,
                RtMsg::Grant {
                    instance: inst,
                    node,
                    seq: t.seq,
                    positions,
                },
            );
        }
        if self.cfg.record_timeline {
            self.sched_spans.push(SchedSpan {
                island: self.scheds[s].island.0,
                start_ns: q.now().0 + offset,
                end_ns: q.now().0 + offset + spent,
                instance: inst.0,
                node: node.0,
            });
        }
        if let Some((c, sub)) = self.scheds[s].gangs.remove(&t.id) {
            let left = self.scheds[s].sub_left.get_mut(&(c, sub)).unwrap();
            *left -= 1;
            if *left == 0 {
                self.scheds[s].sub_left.remove(&(c, sub));
                q.send(
                    sproc,
                    self.clients[c].proc,
                    offset + spent + cost.client_rpc_ns,
                    RtMsg::EnqueueAck { sub },
                );
            }
        }
        spent
    }

    fn sched_submit(
        &mut self,
        q: &mut EventQueue<RtMsg>,
        s: usize,
        c: usize,
        sub: u64,
        inst: InstanceId,
        nodes: Vec<NodeId>,
    ) {
        if self.clients[c].failed {
            for n in nodes {
                self.abandon(q, inst, n);
            }
            return;
        }
        let program = self.instances[&inst].program.clone();
        let client = self.clients[c].plan.client;
        self.scheds[s].sub_left.insert((c, sub), nodes.len());
        for n in nodes {
            let info = &program.info[&n];
            let gang = Gang {
                client,
                instance: inst,
                node: n,
                devices: info.devices.clone(),
                device_time_ns: info.duration_ns * info.devices.len() as u64,
                // Reserved when the run was admitted.
                hbm: Vec::new(),
            };
            match self.scheds[s].sched.submit(gang) {
                Ok(g) => {
                    self.scheds[s].gangs.insert(g, (c, sub));
                    self.instances.get_mut(&inst).unwrap().nodes.get_mut(&n).unwrap().phase = Phase::Queued;
                }
                Err(e) => {
                    self.fail(e.into());
                    return;
                }
            }
        }
        self.sched_pump(q, s);
    }

    // ---- hosts ----

    fn host_try_prep(&mut self, q: &mut EventQueue<RtMsg>, h: usize) {
        if self.hosts[h].busy {
            return;
        }
        let Some((inst, node, _)) = self.hosts[h].grants.front().cloned() else {
            return;
        };
        let i = &self.instances[&inst];
        let info = &i.program.info[&node];
        let sequential = self.cfg.dispatch == DispatchMode::Sequential || !info.regular;
        let me = self.hosts[h].id;
        if sequential {
            if let Some(producers) = info.producer_hosts.get(&me) {
                if producers.iter().any(|p| !i.futures.contains(&(node, me, *p))) {
                    return;
                }
            }
        }
        self.hosts[h].busy = true;
        self.hosts[h].prep_start = q.now().0;
        q.schedule_in(
            self.cfg.cost.host_prep_ns,
            self.hosts[h].proc,
            RtMsg::PrepDone { instance: inst, node },
        );
    }

    fn host_prep_done(&mut self, q: &mut EventQueue<RtMsg>, h: usize, inst: InstanceId, node: NodeId) {
        let (_, _, positions) = self.hosts[h].grants.pop_front().unwrap();
        self.hosts[h].busy = false;
        let me = self.hosts[h].id;
        if self.cfg.record_timeline {
            self.prep_spans.push(PrepSpan {
                host: me.0,
                start_ns: self.hosts[h].prep_start,
                end_ns: q.now().0,
                instance: inst.0,
                node: node.0,
            });
        }
        let ticket_view = Ticket {
            id: GangId(0),
            seq: 0,
            gang: Gang {
                client: ClientId(0),
                instance: inst,
                node,
                devices: Vec::new(),
                device_time_ns: 0,
                hbm: Vec::new(),
            },
            positions,
        };
        let topo = self.topo.clone();
        let local = |d: DeviceId| topo.host_of(d) == me;
        debug_assert!(self.hosts[h].gate.ready(&ticket_view, local));
        self.hosts[h].gate.commit(&ticket_view, local);

        let program = self.instances[&inst].program.clone();
        let info = &program.info[&node];
        let shards = info.local_shards(&self.topo, me);

        // Output buffer: one logical handle on the home host.
        let home = self.topo.host_of(info.devices[0]);
        let client_failed = self.clients[self.instances[&inst].client].failed;
        if !self.instances[&inst].outputs.contains_key(&node) {
            let results = if client_failed { 0 } else { info.result_refs };
            let pending = self
                .instances
                .get_mut(&inst)
                .unwrap()
                .pending_release
                .remove(&node)
                .unwrap_or(0);
            let refs = 1 + info.out_edges.len() as u32 + results - pending;
            let store = &mut self.hosts[home.0 as usize].store;
            let handle = store.put_pending(info.devices.len(), OwnerLabel::Instance(inst));
            for _ in 1..refs {
                store.add_ref(handle).ok();
            }
            let i = self.instances.get_mut(&inst).unwrap();
            i.outputs.insert(node, (home, handle));
            i.nodes.get_mut(&node).unwrap().result_live = results;
        }
        let (_, handle) = self.instances[&inst].outputs[&node];
        for &s in &shards {
            let d = info.devices[s as usize];
            let Some(b) = self.alloc(d, info.out_bytes, inst) else {
                return;
            };
            if self.hosts[home.0 as usize]
                .store
                .resolve(handle, s as usize, ShardHandle::device(d, b, info.out_bytes))
                .is_err()
            {
                self.store_errors += 1;
            }
            if info.staging[s as usize] > 0 {
                let Some(sb) = self.alloc(d, info.staging[s as usize], inst) else {
                    return;
                };
                self.instances
                    .get_mut(&inst)
                    .unwrap()
                    .nodes
                    .get_mut(&node)
                    .unwrap()
                    .staging[s as usize] = Some(sb);
            }
        }

        // Tell producers where this host's input buffers are.
        let ctrl = self.ctrl();
        for e in &info.in_edges {
            let edge = program.graph.edge(*e);
            let src_devs = &program.graph.node(edge.src).devices;
            let mut producers = BTreeSet::new();
            for p in &edge.reshard.as_ref().unwrap().pairs {
                if p.link.is_some() && shards.contains(&p.dst) {
                    producers.insert(self.topo.host_of(src_devs[p.src as usize]));
                }
            }
            for p in producers {
                let delay = if p == me { 0 } else { ctrl };
                q.send(
                    self.hosts[h].proc,
                    self.hosts[p.0 as usize].proc,
                    delay,
                    RtMsg::Address {
                        instance: inst,
                        edge: *e,
                        consumer: me,
                    },
                );
            }
        }

        // Enqueue local shards.
        let pcie = self.topo.pcie.latency_ns;
        let members: Option<Arc<[DeviceId]>> = info.collective.then(|| info.devices.clone().into());
        for &s in &shards {
            let ready = self.instances[&inst].nodes[&node].ready[s as usize];
            let mut exec = KernelExec::new(
                KernelLabel {
                    instance: inst.0,
                    node: node.0,
                    shard: s,
                },
                info.duration_ns,
            );
            if let Some(m) = &members {
                exec = exec.collective((inst.0 << 24) | node.0 as u64, m.clone());
            }
            if !ready {
                exec = exec.awaiting_inputs();
            }
            let d = info.devices[s as usize];
            match self.fabric.submit_kernel(q, self.hosts[h].proc, d, exec, pcie) {
                Ok(k) => {
                    self.instances
                        .get_mut(&inst)
                        .unwrap()
                        .nodes
                        .get_mut(&node)
                        .unwrap()
                        .kernels[s as usize] = Some(k);
                }
                Err(e) => self.fail(ExecError::Invalid(e.to_string())),
            }
        }

        // Hand the output future to consumer hosts once enqueued.
        let mut sent = BTreeSet::new();
        for e in &info.out_edges {
            let edge = program.graph.edge(*e);
            let dst_devs = &program.graph.node(edge.dst).devices;
            for p in &edge.reshard.as_ref().unwrap().pairs {
                if !shards.contains(&p.src) {
                    continue;
                }
                let ch = self.topo.host_of(dst_devs[p.dst as usize]);
                if sent.insert((edge.dst, ch)) {
                    let delay = pcie + if ch == me { 0 } else { ctrl };
                    q.send(
                        self.hosts[h].proc,
                        self.hosts[ch.0 as usize].proc,
                        delay,
                        RtMsg::Future {
                            instance: inst,
                            node: edge.dst,
                            from: me,
                        },
                    );
                }
            }
        }
        self.drain_fabric(q);
        self.host_try_prep(q, h);
    }

    fn start_transfer(
        &mut self,
        q: &mut EventQueue<RtMsg>,
        inst: InstanceId,
        edge: EdgeId,
        src: u32,
        dst: u32,
        bytes: u64,
    ) {
        let program = self.instances[&inst].program.clone();
        let e = program.graph.edge(edge);
        let sd = program.graph.node(e.src).devices[src as usize];
        let dd = program.graph.node(e.dst).devices[dst as usize];
        self.next_token += 1;
        let token = self.next_token;
        self.transfers.insert(
            token,
            XferCtx {
                instance: inst,
                edge,
                src,
                dst,
            },
        );
        if let Err(err) = self.fabric.transfer(q, sd, dd, bytes, token) {
            self.fail(ExecError::Invalid(err.to_string()));
        }
    }

    fn on_address(&mut self, q: &mut EventQueue<RtMsg>, h: usize, inst: InstanceId, edge: EdgeId, consumer: HostId) {
        let me = self.hosts[h].id;
        let Some(i) = self.instances.get_mut(&inst) else {
            return;
        };
        i.addresses.insert((edge, consumer, me));
        let program = i.program.clone();
        let e = program.graph.edge(edge);
        let src_devs = &program.graph.node(e.src).devices;
        let dst_devs = &program.graph.node(e.dst).devices;
        let src_node = &i.nodes[&e.src];
        let mut starts = Vec::new();
        for p in &e.reshard.as_ref().unwrap().pairs {
            if p.link.is_some()
                && self.topo.host_of(src_devs[p.src as usize]) == me
                && self.topo.host_of(dst_devs[p.dst as usize]) == consumer
                && src_node.done[p.src as usize]
            {
                starts.push(*p);
            }
        }
        for p in starts {
            self.start_transfer(q, inst, edge, p.src, p.dst, p.bytes);
        }
    }

    /// A data tuple reached its destination shard, with the source's
    /// punctuation riding on the first tuple of each source.
    fn deliver(&mut self, q: &mut EventQueue<RtMsg>, inst: InstanceId, edge: EdgeId, src: u32, dst: u32) {
        let i = self.instances.get_mut(&inst).unwrap();
        let program = i.program.clone();
        let c = i.client;
        let first = i.punctuated.insert((edge, src));
        let spec = program.graph.edge(edge).reshard.as_ref().unwrap();
        let tracker = self.clients[c].coord.tracker();
        let mut ready: Vec<ShardReady> = Vec::new();
        let t = DataTuple {
            edge,
            instance: inst,
            src,
            dst,
            bytes: 0,
        };
        match tracker.on_tuple(&t) {
            Ok(r) => ready.extend(r),
            Err(e) => self.error = Some(ExecError::Invalid(e.to_string())),
        }
        if first {
            let p = Punctuation {
                edge,
                instance: inst,
                src,
                counts: spec.pairs.iter().filter(|p| p.src == src).map(|p| (p.dst, 1)).collect(),
            };
            match self.clients[c].coord.tracker().on_punctuation(&p) {
                Ok(r) => ready.extend(r),
                Err(e) => self.error = Some(ExecError::Invalid(e.to_string())),
            }
        }
        for r in ready {
            let n = self.instances.get_mut(&inst).unwrap().nodes.get_mut(&r.node).unwrap();
            n.ready[r.shard as usize] = true;
            if let Some(k) = n.kernels[r.shard as usize] {
                self.fabric.set_inputs_ready(q, k);
            }
        }
    }

    fn on_kernel_done(
        &mut self,
        q: &mut EventQueue<RtMsg>,
        device: DeviceId,
        label: KernelLabel,
        start: u64,
        end: u64,
    ) {
        let inst = InstanceId(label.instance);
        let node = NodeId(label.node);
        let s = label.shard;
        let h = self.host_index(self.topo.host_of(device));
        self.report(q, h, Report::KernelDone(device));
        let i = self.instances.get_mut(&inst).unwrap();
        let c = i.client;
        self.samples.push(KernelSample {
            client: self.clients[c].plan.client.0,
            device: device.0,
            instance: inst.0,
            node: node.0,
            start_ns: start,
            end_ns: end,
        });
        let program = i.program.clone();
        let info = &program.info[&node];
        let n = i.nodes.get_mut(&node).unwrap();
        n.done[s as usize] = true;
        n.done_count += 1;
        if let Some(b) = n.staging[s as usize].take() {
            let bytes = info.staging[s as usize];
            self.free_buffer(q, device, b, bytes);
        }
        let me = self.topo.host_of(device);
        for e in &info.out_edges {
            let edge = program.graph.edge(*e);
            if self.instances[&inst].nodes[&edge.dst].phase == Phase::Abandoned {
                continue;
            }
            let dst_devs = &program.graph.node(edge.dst).devices;
            for p in &edge.reshard.as_ref().unwrap().pairs {
                if p.src != s {
                    continue;
                }
                if p.link.is_none() {
                    self.deliver(q, inst, *e, p.src, p.dst);
                    continue;
                }
                let ch = self.topo.host_of(dst_devs[p.dst as usize]);
                if self.instances[&inst].addresses.contains(&(*e, ch, me)) {
                    self.start_transfer(q, inst, *e, p.src, p.dst, p.bytes);
                }
            }
        }
        if self.instances[&inst].nodes[&node].done_count == info.devices.len() {
            self.node_complete(q, h, inst, node);
        }
    }

    fn node_complete(&mut self, q: &mut EventQueue<RtMsg>, h: usize, inst: InstanceId, node: NodeId) {
        let i = self.instances.get_mut(&inst).unwrap();
        let program = i.program.clone();
        let info = &program.info[&node];
        let n = i.nodes.get_mut(&node).unwrap();
        n.phase = Phase::Done;
        let result_live = std::mem::take(&mut n.result_live);
        let ins = program.input_digests(node, &i.digests);
        let digest = node_digest(&ins, &info.names);
        i.digests.insert(node, digest);
        let c = i.client;
        let (home, handle) = i.outputs[&node];
        for e in info.in_edges.iter().chain(&info.arg_edges) {
            let src = program.graph.edge(*e).src;
            self.release_output(q, inst, src);
        }
        // The producing kernels no longer need the buffer.
        self.release_handle(q, home, handle, 1);
        let result = if result_live == 0 {
            None
        } else if self.clients[c].failed {
            self.release_handle(q, home, handle, result_live);
            None
        } else {
            Some((home, handle, result_live))
        };
        q.send(
            self.hosts[h].proc,
            self.clients[c].proc,
            self.cfg.cost.client_rpc_ns,
            RtMsg::NodeComplete {
                instance: inst,
                node,
                digest,
                result,
            },
        );
        self.node_retired(inst);
    }

    fn client_node_complete(
        &mut self,
        q: &mut EventQueue<RtMsg>,
        c: usize,
        inst: InstanceId,
        node: NodeId,
        digest: u64,
        result: Option<(HostId, ObjectHandle, u32)>,
    ) {
        if self.clients[c].failed {
            if let Some((home, h, refs)) = result {
                self.release_handle(q, home, h, refs);
            }
            return;
        }
        let Some(run) = self.clients[c].runs.get_mut(&inst) else {
            return;
        };
        run.done += 1;
        run.digests.insert(node, digest);
        if let Some(r) = result {
            run.results.push(r);
        }
        if run.done == run.total {
            self.finish_run(c, inst, q.now().0);
            let old = std::mem::take(&mut self.pending_client_releases);
            for (home, h, refs) in old {
                self.release_handle(q, home, h, refs);
            }
        }
        self.client_advance(q, c);
    }

    fn drain_fabric(&mut self, q: &mut EventQueue<RtMsg>) {
        loop {
            let notices = self.fabric.drain_notices();
            if notices.is_empty() {
                return;
            }
            for n in notices {
                match n {
                    FabricNotice::KernelStarted { .. } => {}
                    FabricNotice::KernelCompleted {
                        device,
                        label,
                        start,
                        end,
                        ..
                    } => self.on_kernel_done(q, device, label, start.0, end.0),
                    FabricNotice::TransferCompleted { token, .. } => {
                        if let Some(x) = self.transfers.remove(&token) {
                            self.deliver(q, x.instance, x.edge, x.src, x.dst);
                        }
                    }
                }
            }
        }
    }

    fn shutdown(&mut self, q: &mut EventQueue<RtMsg>) {
        self.closing = true;
        for c in 0..self.clients.len() {
            let held = std::mem::take(&mut self.clients[c].held);
            for (home, h, refs) in held {
                self.release_handle(q, home, h, refs);
            }
        }
        // Deliver whatever frees are still batched, without the wire delay.
        for h in 0..self.hosts.len() {
            let island = self.topo.host_island(self.hosts[h].id);
            if let Some(batch) = self.hosts[h].batcher.flush_before_critical(island) {
                self.apply_reports(island.0 as usize, batch);
            }
        }
    }

    fn apply_reports(&mut self, s: usize, batch: Vec<Report>) {
        self.reports_outstanding -= batch.len();
        for r in batch {
            match r {
                Report::KernelDone(d) => self.scheds[s].sched.kernel_done(d),
                Report::HbmFree(d, b) => self.scheds[s].sched.release_hbm(d, b),
            }
        }
    }

    fn hygiene(&self) -> Hygiene {
        let allocated_bytes = (0..self.topo.devices.len())
            .map(|d| self.fabric.hbm(DeviceId(d as u32)).allocated())
            .sum();
        let ledger_bytes = self
            .scheds
            .iter()
            .map(|s| s.sched.devices().map(|d| s.sched.used(d)).sum::<u64>())
            .sum();
        let mut seen = BTreeSet::new();
        let fabric_double_frees = self
            .fabric
            .free_log()
            .iter()
            .filter(|f| !seen.insert((f.device, f.buffer)))
            .count()
            + self.fabric_errors as usize;
        Hygiene {
            allocated_bytes,
            ledger_bytes,
            live_objects: self.hosts.iter().map(|h| h.store.live()).sum(),
            fabric_double_frees,
            store_double_frees: self.hosts.iter().map(|h| double_frees(h.store.free_log())).sum(),
            store_errors: self.store_errors,
            refcount_ops: self.hosts.iter().map(|h| h.store.refcount_ops()).sum(),
        }
    }
}

impl Model for Runtime {
    type Msg = RtMsg;

    fn handle(&mut self, q: &mut EventQueue<RtMsg>, ev: SimEvent<RtMsg>) {
        if let RtMsg::Fabric(m) = ev.payload {
            self.fabric.handle(q, m);
            self.drain_fabric(q);
            return;
        }
        let Some(role) = self.roles.get(&ev.target).copied() else {
            return;
        };
        match (role, ev.payload) {
            (Role::Client(c), RtMsg::ClientStart) => self.client_advance(q, c),
            (Role::Client(c), RtMsg::ClientRetry) => {
                self.clients[c].retry_armed = false;
                self.client_advance(q, c);
            }
            (Role::Client(c), RtMsg::ClientFail) => self.client_failed(q, c),
            (Role::Client(c), RtMsg::EnqueueAck { sub }) => {
                let cl = &mut self.clients[c];
                if let Some(left) = cl.acks_pending.get_mut(&sub) {
                    *left -= 1;
                    if *left == 0 {
                        cl.acks_pending.remove(&sub);
                    }
                }
                self.client_advance(q, c);
            }
            (
                Role::Client(c),
                RtMsg::NodeComplete {
                    instance,
                    node,
                    digest,
                    result,
                },
            ) => self.client_node_complete(q, c, instance, node, digest, result),
            (
                Role::Sched(s),
                RtMsg::Submit {
                    client,
                    sub,
                    instance,
                    nodes,
                },
            ) => self.sched_submit(q, s, client, sub, instance, nodes),
            (Role::Sched(s), RtMsg::SchedWake) => {
                if self.scheds[s].wake_at == Some(q.now()) {
                    self.scheds[s].wake_at = None;
                }
                self.sched_pump(q, s);
            }
            (Role::Sched(s), RtMsg::Reports(batch)) => {
                self.apply_reports(s, batch);
                self.sched_pump(q, s);
            }
            (
                Role::Host(h),
                RtMsg::Grant {
                    instance,
                    node,
                    positions,
                    ..
                },
            ) => {
                self.hosts[h].grants.push_back((instance, node, positions));
                self.host_try_prep(q, h);
            }
            (Role::Host(h), RtMsg::PrepDone { instance, node }) => self.host_prep_done(q, h, instance, node),
            (Role::Host(h), RtMsg::Future { instance, node, from }) => {
                let me = self.hosts[h].id;
                if let Some(i) = self.instances.get_mut(&instance) {
                    i.futures.insert((node, me, from));
                }
                self.host_try_prep(q, h);
            }
            (
                Role::Host(h),
                RtMsg::Address {
                    instance,
                    edge,
                    consumer,
                },
            ) => {
                self.on_address(q, h, instance, edge, consumer);
                self.drain_fabric(q);
            }
            (Role::Host(h), RtMsg::BatchTimer { token }) => {
                let island = self.topo.host_island(self.hosts[h].id);
                if let Some(batch) = self.hosts[h].batcher.on_timer(island, token) {
                    let host = &self.hosts[h];
                    q.send(
                        host.proc,
                        host.sched_proc,
                        self.topo.dcn.latency_ns,
                        RtMsg::Reports(batch),
                    );
                }
            }
            _ => {}
        }
        self.drain_fabric(q);
    }

    fn blocked(&self) -> Vec<BlockedProcess> {
        let mut out = self.fabric.blocked();
        for h in &self.hosts {
            if let Some((inst, node, _)) = h.grants.front() {
                out.push(BlockedProcess {
                    process: h.proc,
                    waiting_on: vec![],
                    reason: format!("host {} waiting to prepare {inst} node {}", h.id.0, node.0),
                });
            }
        }
        for s in &self.scheds {
            if s.sched.queued() > 0 {
                out.push(BlockedProcess {
                    process: s.proc,
                    waiting_on: vec![],
                    reason: format!("{} gangs queued on island {}", s.sched.queued(), s.island.0),
                });
            }
        }
        out
    }
}
