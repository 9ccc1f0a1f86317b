//! Device-level behaviour: non-preemptible kernel queues, collective
//! rendezvous, DMA transfers and per-device memory.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use super::hbm::{AllocOutcome, BufferId, Grant, HbmPool};
use super::topology::{DeviceId, LinkKind, Topology};
use super::HardwareError;
use crate::ids::OwnerLabel;
use crate::simcore::{
    BlockedProcess, EventQueue, Model, Payload, ProcessId, ProcessKind, SimEvent, Simulation, VirtualTime,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct KernelId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TransferId(pub u64);

/// What a kernel belongs to: program instance, node and shard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct KernelLabel {
    pub instance: u64,
    pub node: u32,
    pub shard: u32,
}

/// Rendezvous group. All kernels sharing `key` must reach the head of their
/// device queues before any of them runs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CollectiveSpec {
    pub key: u64,
    pub members: Arc<[DeviceId]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KernelExec {
    pub label: KernelLabel,
    pub duration_ns: u64,
    pub collective: Option<CollectiveSpec>,
    /// False while the kernel still waits for input data.
    pub inputs_ready: bool,
}

impl KernelExec {
    pub fn new(label: KernelLabel, duration_ns: u64) -> Self {
        KernelExec {
            label,
            duration_ns,
            collective: None,
            inputs_ready: true,
        }
    }

    pub fn collective(mut self, key: u64, members: Arc<[DeviceId]>) -> Self {
        self.collective = Some(CollectiveSpec { key, members });
        self
    }

    pub fn awaiting_inputs(mut self) -> Self {
        self.inputs_ready = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FabricMsg {
    KernelArrive { kernel: KernelId },
    KernelComplete { kernel: KernelId },
    TransferComplete { transfer: TransferId },
}

impl Payload for FabricMsg {
    fn kind(&self) -> &'static str {
        match self {
            FabricMsg::KernelArrive { .. } => "kernel_arrive",
            FabricMsg::KernelComplete { .. } => "kernel_complete",
            FabricMsg::TransferComplete { .. } => "transfer_complete",
        }
    }
}

/// Completion notifications produced by the fabric; drained by the owner.
#[derive(Clone, Debug, PartialEq)]
pub enum FabricNotice {
    KernelStarted {
        kernel: KernelId,
        device: DeviceId,
        label: KernelLabel,
        at: VirtualTime,
    },
    KernelCompleted {
        kernel: KernelId,
        device: DeviceId,
        label: KernelLabel,
        start: VirtualTime,
        end: VirtualTime,
    },
    TransferCompleted {
        transfer: TransferId,
        token: u64,
        src: DeviceId,
        dst: DeviceId,
        bytes: u64,
        start: VirtualTime,
        end: VirtualTime,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelRecord {
    pub kernel: KernelId,
    pub device: DeviceId,
    pub label: KernelLabel,
    pub start: VirtualTime,
    pub end: VirtualTime,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferRecord {
    pub src: DeviceId,
    pub dst: DeviceId,
    pub bytes: u64,
    pub link: Option<LinkKind>,
    pub start: VirtualTime,
    pub end: VirtualTime,
    pub token: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct FreeRecord {
    pub device: DeviceId,
    pub buffer: BufferId,
    pub at: VirtualTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    InFlight,
    Queued,
    Running,
}

struct KernelState {
    exec: KernelExec,
    device: DeviceId,
    phase: Phase,
    arrived_in_group: bool,
    start: VirtualTime,
}

struct Group {
    size: usize,
    arrived: Vec<KernelId>,
}

struct DeviceState {
    queue: VecDeque<KernelId>,
    running: Option<KernelId>,
    busy_ns: u64,
    completed: u64,
    hbm: HbmPool,
}

struct TransferState {
    src: DeviceId,
    dst: DeviceId,
    bytes: u64,
    start: VirtualTime,
    token: u64,
}

pub struct Fabric {
    topo: Arc<Topology>,
    procs: Vec<ProcessId>,
    proc_to_device: HashMap<ProcessId, DeviceId>,
    devices: Vec<DeviceState>,
    kernels: HashMap<KernelId, KernelState>,
    groups: HashMap<u64, Group>,
    transfers: HashMap<TransferId, TransferState>,
    next_id: u64,
    notices: Vec<FabricNotice>,
    free_log: Vec<FreeRecord>,
    kernel_records: Option<Vec<KernelRecord>>,
    transfer_records: Option<Vec<TransferRecord>>,
}

impl Fabric {
    /// Register one logical process per device of `topo`.
    pub fn new<M: Payload>(topo: Arc<Topology>, sim: &mut Simulation<M>) -> Self {
        let procs: Vec<_> = topo
            .devices
            .iter()
            .map(|_| sim.add_process(ProcessKind::Device))
            .collect();
        let proc_to_device = procs
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, DeviceId(i as u32)))
            .collect();
        let devices = topo
            .devices
            .iter()
            .map(|d| DeviceState {
                queue: VecDeque::new(),
                running: None,
                busy_ns: 0,
                completed: 0,
                hbm: HbmPool::new(d.hbm_capacity),
            })
            .collect();
        Fabric {
            topo,
            procs,
            proc_to_device,
            devices,
            kernels: HashMap::new(),
            groups: HashMap::new(),
            transfers: HashMap::new(),
            next_id: 0,
            notices: Vec::new(),
            free_log: Vec::new(),
            kernel_records: None,
            transfer_records: None,
        }
    }

    /// Keep per-kernel and per-transfer records for trace emission.
    pub fn record_timeline(&mut self) {
        self.kernel_records = Some(Vec::new());
        self.transfer_records = Some(Vec::new());
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn process_of(&self, device: DeviceId) -> ProcessId {
        self.procs[device.0 as usize]
    }

    pub fn device_of(&self, process: ProcessId) -> Option<DeviceId> {
        self.proc_to_device.get(&process).copied()
    }

    fn check(&self, device: DeviceId) -> Result<(), HardwareError> {
        if (device.0 as usize) < self.devices.len() {
            Ok(())
        } else {
            Err(HardwareError::UnknownDevice(device))
        }
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    /// Append a kernel to `device`'s queue right now.
    pub fn enqueue_kernel<M: From<FabricMsg>>(
        &mut self,
        q: &mut EventQueue<M>,
        device: DeviceId,
        exec: KernelExec,
    ) -> Result<KernelId, HardwareError> {
        self.check(device)?;
        let id = KernelId(self.fresh_id());
        self.kernels.insert(
            id,
            KernelState {
                exec,
                device,
                phase: Phase::Queued,
                arrived_in_group: false,
                start: VirtualTime::ZERO,
            },
        );
        self.devices[device.0 as usize].queue.push_back(id);
        self.advance(q, device);
        Ok(id)
    }

    /// Send a kernel to `device` over the `from -> device` channel; it joins
    /// the device queue after `delay_ns`. Channel FIFO keeps enqueue order.
    pub fn submit_kernel<M: From<FabricMsg>>(
        &mut self,
        q: &mut EventQueue<M>,
        from: ProcessId,
        device: DeviceId,
        exec: KernelExec,
        delay_ns: u64,
    ) -> Result<KernelId, HardwareError> {
        self.check(device)?;
        let id = KernelId(self.fresh_id());
        self.kernels.insert(
            id,
            KernelState {
                exec,
                device,
                phase: Phase::InFlight,
                arrived_in_group: false,
                start: VirtualTime::ZERO,
            },
        );
        q.send(
            from,
            self.process_of(device),
            delay_ns,
            FabricMsg::KernelArrive { kernel: id }.into(),
        );
        Ok(id)
    }

    pub fn set_inputs_ready<M: From<FabricMsg>>(&mut self, q: &mut EventQueue<M>, kernel: KernelId) {
        let Some(k) = self.kernels.get_mut(&kernel) else {
            return;
        };
        if k.exec.inputs_ready {
            return;
        }
        k.exec.inputs_ready = true;
        let (device, phase) = (k.device, k.phase);
        if phase == Phase::Queued {
            self.advance(q, device);
        }
    }

    /// Start a DMA transfer. It does not occupy either device's kernel queue.
    /// Completion is reported with `token` attached.
    pub fn transfer<M: From<FabricMsg>>(
        &mut self,
        q: &mut EventQueue<M>,
        src: DeviceId,
        dst: DeviceId,
        bytes: u64,
        token: u64,
    ) -> Result<(TransferId, VirtualTime), HardwareError> {
        self.check(src)?;
        self.check(dst)?;
        let id = TransferId(self.fresh_id());
        let done = q.now() + self.topo.transfer_ns(src, dst, bytes);
        self.transfers.insert(
            id,
            TransferState {
                src,
                dst,
                bytes,
                start: q.now(),
                token,
            },
        );
        q.schedule(
            done,
            self.process_of(dst),
            FabricMsg::TransferComplete { transfer: id }.into(),
        );
        Ok((id, done))
    }

    pub fn alloc_hbm(
        &mut self,
        device: DeviceId,
        bytes: u64,
        owner: OwnerLabel,
    ) -> Result<AllocOutcome, HardwareError> {
        self.check(device)?;
        let mut next = self.next_id;
        let out = self.devices[device.0 as usize].hbm.alloc(bytes, owner, &mut next);
        self.next_id = next;
        out
    }

    /// Free a buffer; returns the queued allocations this unblocked.
    pub fn free_hbm(
        &mut self,
        now: VirtualTime,
        device: DeviceId,
        buffer: BufferId,
    ) -> Result<Vec<Grant>, HardwareError> {
        self.check(device)?;
        let mut next = self.next_id;
        let grants = self.devices[device.0 as usize].hbm.free(buffer, &mut next)?;
        self.next_id = next;
        self.free_log.push(FreeRecord {
            device,
            buffer,
            at: now,
        });
        Ok(grants)
    }

    pub fn hbm(&self, device: DeviceId) -> &HbmPool {
        &self.devices[device.0 as usize].hbm
    }

    pub fn free_log(&self) -> &[FreeRecord] {
        &self.free_log
    }

    pub fn busy_ns(&self, device: DeviceId) -> u64 {
        self.devices[device.0 as usize].busy_ns
    }

    pub fn completed_kernels(&self, device: DeviceId) -> u64 {
        self.devices[device.0 as usize].completed
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn is_idle(&self, device: DeviceId) -> bool {
        let d = &self.devices[device.0 as usize];
        d.queue.is_empty() && d.running.is_none()
    }

    pub fn drain_notices(&mut self) -> Vec<FabricNotice> {
        std::mem::take(&mut self.notices)
    }

    pub fn kernel_records(&self) -> &[KernelRecord] {
        self.kernel_records.as_deref().unwrap_or(&[])
    }

    pub fn transfer_records(&self) -> &[TransferRecord] {
        self.transfer_records.as_deref().unwrap_or(&[])
    }

    pub fn handle<M: From<FabricMsg>>(&mut self, q: &mut EventQueue<M>, msg: FabricMsg) {
        match msg {
            FabricMsg::KernelArrive { kernel } => {
                let k = self.kernels.get_mut(&kernel).expect("arriving kernel exists");
                debug_assert_eq!(k.phase, Phase::InFlight);
                k.phase = Phase::Queued;
                let device = k.device;
                self.devices[device.0 as usize].queue.push_back(kernel);
                self.advance(q, device);
            }
            FabricMsg::KernelComplete { kernel } => {
                let k = self.kernels.remove(&kernel).expect("completing kernel exists");
                let dev = &mut self.devices[k.device.0 as usize];
                debug_assert_eq!(dev.running, Some(kernel));
                debug_assert_eq!(dev.queue.front(), Some(&kernel));
                dev.queue.pop_front();
                dev.running = None;
                dev.completed += 1;
                let end = q.now();
                dev.busy_ns += end - k.start;
                if let Some(records) = self.kernel_records.as_mut() {
                    records.push(KernelRecord {
                        kernel,
                        device: k.device,
                        label: k.exec.label,
                        start: k.start,
                        end,
                    });
                }
                self.notices.push(FabricNotice::KernelCompleted {
                    kernel,
                    device: k.device,
                    label: k.exec.label,
                    start: k.start,
                    end,
                });
                self.advance(q, k.device);
            }
            FabricMsg::TransferComplete { transfer } => {
                let t = self.transfers.remove(&transfer).expect("transfer exists");
                let end = q.now();
                if let Some(records) = self.transfer_records.as_mut() {
                    records.push(TransferRecord {
                        src: t.src,
                        dst: t.dst,
                        bytes: t.bytes,
                        link: self.topo.link_between(t.src, t.dst).map(|l| l.kind),
                        start: t.start,
                        end,
                        token: t.token,
                    });
                }
                self.notices.push(FabricNotice::TransferCompleted {
                    transfer,
                    token: t.token,
                    src: t.src,
                    dst: t.dst,
                    bytes: t.bytes,
                    start: t.start,
                    end,
                });
            }
        }
    }

    /// Try to start the head kernel of `device`.
    fn advance<M: From<FabricMsg>>(&mut self, q: &mut EventQueue<M>, device: DeviceId) {
        let dev = &self.devices[device.0 as usize];
        if dev.running.is_some() {
            return;
        }
        let Some(&head) = dev.queue.front() else {
            return;
        };
        let k = self.kernels.get_mut(&head).expect("queued kernel exists");
        if !k.exec.inputs_ready {
            return;
        }
        let Some(coll) = k.exec.collective.clone() else {
            self.start(q, head, q.now());
            return;
        };
        if k.arrived_in_group {
            return;
        }
        k.arrived_in_group = true;
        let group = self.groups.entry(coll.key).or_insert_with(|| Group {
            size: coll.members.len(),
            arrived: Vec::new(),
        });
        group.arrived.push(head);
        if group.arrived.len() == group.size {
            let members = self.groups.remove(&coll.key).unwrap().arrived;
            // Every member completes at the same instant.
            let duration = members
                .iter()
                .map(|m| self.kernels[m].exec.duration_ns)
                .max()
                .unwrap_or(0);
            for m in members {
                self.kernels.get_mut(&m).unwrap().exec.duration_ns = duration;
                self.start(q, m, q.now());
            }
        }
    }

    fn start<M: From<FabricMsg>>(&mut self, q: &mut EventQueue<M>, kernel: KernelId, at: VirtualTime) {
        let k = self.kernels.get_mut(&kernel).unwrap();
        k.phase = Phase::Running;
        k.start = at;
        let device = k.device;
        let label = k.exec.label;
        let done = at + k.exec.duration_ns;
        self.devices[device.0 as usize].running = Some(kernel);
        q.schedule(
            done,
            self.procs[device.0 as usize],
            FabricMsg::KernelComplete { kernel }.into(),
        );
        self.notices.push(FabricNotice::KernelStarted {
            kernel,
            device,
            label,
            at,
        });
    }

    /// Devices whose queue cannot advance, with the devices they wait for.
    pub fn blocked(&self) -> Vec<BlockedProcess> {
        let mut out = Vec::new();
        for (i, dev) in self.devices.iter().enumerate() {
            let Some(head) = dev.queue.front() else {
                if dev.hbm.waiting() > 0 {
                    out.push(BlockedProcess {
                        process: self.procs[i],
                        waiting_on: vec![],
                        reason: format!("{} allocations waiting for memory", dev.hbm.waiting()),
                    });
                }
                continue;
            };
            if dev.running.is_some() {
                continue;
            }
            let k = &self.kernels[head];
            if !k.exec.inputs_ready {
                out.push(BlockedProcess {
                    process: self.procs[i],
                    waiting_on: vec![],
                    reason: format!("kernel {:?} awaiting inputs", k.exec.label),
                });
                continue;
            }
            if let Some(coll) = &k.exec.collective {
                let waiting_on = coll
                    .members
                    .iter()
                    .filter(|&&m| {
                        let peer_head = self.devices[m.0 as usize].queue.front();
                        !peer_head.is_some_and(|h| {
                            self.kernels[h]
                                .exec
                                .collective
                                .as_ref()
                                .is_some_and(|c| c.key == coll.key)
                                && self.kernels[h].arrived_in_group
                        })
                    })
                    .map(|m| self.procs[m.0 as usize])
                    .collect();
                out.push(BlockedProcess {
                    process: self.procs[i],
                    waiting_on,
                    reason: format!("collective {} rendezvous", coll.key),
                });
            }
        }
        out
    }

    /// Label of the kernel at the head of a device queue.
    pub fn head_label(&self, device: DeviceId) -> Option<KernelLabel> {
        self.devices[device.0 as usize]
            .queue
            .front()
            .map(|k| self.kernels[k].exec.label)
    }
}

/// A bare fabric driven directly by the event loop, for device-level
/// experiments that need no host or scheduler.
pub struct FabricModel {
    pub fabric: Fabric,
    pub notices: Vec<(VirtualTime, FabricNotice)>,
}

impl FabricModel {
    pub fn new(topo: Arc<Topology>, sim: &mut Simulation<FabricMsg>) -> Self {
        FabricModel {
            fabric: Fabric::new(topo, sim),
            notices: Vec::new(),
        }
    }

    pub fn completion_of(&self, kernel: KernelId) -> Option<VirtualTime> {
        self.notices.iter().find_map(|(_, n)| match n {
            FabricNotice::KernelCompleted { kernel: k, end, .. } if *k == kernel => Some(*end),
            _ => None,
        })
    }

    fn collect(&mut self, now: VirtualTime) {
        for n in self.fabric.drain_notices() {
            self.notices.push((now, n));
        }
    }
}

impl Model for FabricModel {
    type Msg = FabricMsg;

    fn handle(&mut self, q: &mut EventQueue<FabricMsg>, ev: SimEvent<FabricMsg>) {
        self.fabric.handle(q, ev.payload);
        self.collect(q.now());
    }

    fn blocked(&self) -> Vec<BlockedProcess> {
        self.fabric.blocked()
    }
}
