//! Gang scheduling: one scheduler per island orders every gang on every
//! device it spans, so per-device enqueue orders agree and collectives
//! cannot deadlock.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::DeviceId;
use crate::ids::{ClientId, InstanceId};
use crate::ir::NodeId;

/// Scale for stride passes so integer division keeps precision.
const STRIDE_SCALE: u128 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GangId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Fifo,
    /// Stride scheduling on device time, weighted per client. Clients
    /// without a weight get 1.
    Proportional {
        weights: BTreeMap<ClientId, u32>,
    },
}

/// One sharded computation to run on all of `devices` together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gang {
    pub client: ClientId,
    pub instance: InstanceId,
    pub node: NodeId,
    pub devices: Vec<DeviceId>,
    /// Summed over all shards; what the client is charged.
    pub device_time_ns: u64,
    /// Bytes reserved per device while the outputs are alive.
    pub hbm: Vec<(DeviceId, u64)>,
}

/// Permission to enqueue a gang. `positions` is the gang's slot in each
/// device's queue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ticket {
    pub id: GangId,
    pub seq: u64,
    pub gang: Gang,
    pub positions: Vec<(DeviceId, u64)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("gang has no devices")]
    EmptyGang,
    #[error("device {} is not managed by this scheduler", .0 .0)]
    UnknownDevice(DeviceId),
    #[error("gang needs {bytes} bytes on device {}, capacity is {capacity}", .device.0)]
    ExceedsCapacity {
        device: DeviceId,
        bytes: u64,
        capacity: u64,
    },
}

#[derive(Clone, Debug, Default)]
struct DeviceState {
    capacity: u64,
    used: u64,
    inflight: u32,
    next_position: u64,
}

#[derive(Clone, Debug, Default)]
struct ClientState {
    queue: VecDeque<(GangId, u64, Gang)>,
    pass: u128,
    weight: u32,
    charged_ns: u128,
}

#[derive(Clone, Debug)]
pub struct GangScheduler {
    policy: Policy,
    window: Option<u32>,
    devices: BTreeMap<DeviceId, DeviceState>,
    clients: BTreeMap<ClientId, ClientState>,
    next_gang: u64,
    next_seq: u64,
    next_ticket: u64,
}

impl GangScheduler {
    /// `capacities` lists every managed device with its HBM size.
    pub fn new(policy: Policy, window: Option<u32>, capacities: impl IntoIterator<Item = (DeviceId, u64)>) -> Self {
        let devices = capacities
            .into_iter()
            .map(|(d, capacity)| {
                (
                    d,
                    DeviceState {
                        capacity,
                        ..DeviceState::default()
                    },
                )
            })
            .collect();
        GangScheduler {
            policy,
            window,
            devices,
            clients: BTreeMap::new(),
            next_gang: 0,
            next_seq: 0,
            next_ticket: 0,
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    fn weight_of(&self, c: ClientId) -> u32 {
        match &self.policy {
            Policy::Fifo => 1,
            Policy::Proportional { weights } => weights.get(&c).copied().unwrap_or(1).max(1),
        }
    }

    pub fn submit(&mut self, gang: Gang) -> Result<GangId, SchedError> {
        if gang.devices.is_empty() {
            return Err(SchedError::EmptyGang);
        }
        for d in &gang.devices {
            if !self.devices.contains_key(d) {
                return Err(SchedError::UnknownDevice(*d));
            }
        }
        for &(d, bytes) in &gang.hbm {
            let st = self.devices.get(&d).ok_or(SchedError::UnknownDevice(d))?;
            if bytes > st.capacity {
                return Err(SchedError::ExceedsCapacity {
                    device: d,
                    bytes,
                    capacity: st.capacity,
                });
            }
        }
        let min_active = self
            .clients
            .values()
            .filter(|c| !c.queue.is_empty())
            .map(|c| c.pass)
            .min();
        let weight = self.weight_of(gang.client);
        let c = self.clients.entry(gang.client).or_default();
        c.weight = weight;
        if c.queue.is_empty() {
            // Idle time earns no credit.
            if let Some(m) = min_active {
                c.pass = c.pass.max(m);
            }
        }
        let id = GangId(self.next_gang);
        self.next_gang += 1;
        c.queue.push_back((id, self.next_seq, gang));
        self.next_seq += 1;
        Ok(id)
    }

    fn admissible(&self, g: &Gang, blocked: &BTreeSet<DeviceId>) -> bool {
        if g.devices.iter().any(|d| blocked.contains(d)) {
            return false;
        }
        if let Some(w) = self.window {
            if g.devices.iter().any(|d| self.devices[d].inflight >= w) {
                return false;
            }
        }
        let mut need: BTreeMap<DeviceId, u64> = BTreeMap::new();
        for &(d, b) in &g.hbm {
            *need.entry(d).or_default() += b;
        }
        need.iter().all(|(d, b)| {
            let st = &self.devices[d];
            st.used + b <= st.capacity
        })
    }

    /// Ticket every gang that can go now, in policy order. A gang that
    /// cannot go blocks its client and its devices for the rest of the walk,
    /// so nothing overtakes it.
    pub fn next_dispatch(&mut self) -> Vec<Ticket> {
        let mut out = Vec::new();
        let mut blocked_devices = BTreeSet::new();
        let mut blocked_clients = BTreeSet::new();
        loop {
            if blocked_devices.len() == self.devices.len() {
                break;
            }
            let pick = self
                .clients
                .iter()
                .filter(|(id, c)| !c.queue.is_empty() && !blocked_clients.contains(*id))
                .min_by_key(|(id, c)| match self.policy {
                    Policy::Fifo => (0, c.queue[0].1, **id),
                    Policy::Proportional { .. } => (c.pass, 0, **id),
                })
                .map(|(id, _)| *id);
            let Some(cid) = pick else { break };
            let gang = &self.clients[&cid].queue[0].2;
            if !self.admissible(gang, &blocked_devices) {
                blocked_devices.extend(gang.devices.iter().copied());
                blocked_clients.insert(cid);
                continue;
            }
            let c = self.clients.get_mut(&cid).unwrap();
            let (id, _, gang) = c.queue.pop_front().unwrap();
            let w = c.weight.max(1) as u128;
            c.pass += gang.device_time_ns as u128 * STRIDE_SCALE / w;
            c.charged_ns += gang.device_time_ns as u128;
            out.push(self.issue(id, gang));
        }
        out
    }

    fn issue(&mut self, id: GangId, gang: Gang) -> Ticket {
        let mut positions = Vec::with_capacity(gang.devices.len());
        for d in &gang.devices {
            let st = self.devices.get_mut(d).unwrap();
            positions.push((*d, st.next_position));
            st.next_position += 1;
            st.inflight += 1;
        }
        for &(d, b) in &gang.hbm {
            self.devices.get_mut(&d).unwrap().used += b;
        }
        let seq = self.next_ticket;
        self.next_ticket += 1;
        Ticket {
            id,
            seq,
            gang,
            positions,
        }
    }

    /// A ticketed kernel finished on `device`.
    pub fn kernel_done(&mut self, device: DeviceId) {
        if let Some(st) = self.devices.get_mut(&device) {
            st.inflight = st.inflight.saturating_sub(1);
        }
    }

    pub fn release_hbm(&mut self, device: DeviceId, bytes: u64) {
        if let Some(st) = self.devices.get_mut(&device) {
            st.used = st.used.saturating_sub(bytes);
        }
    }

    /// Reserve outside any gang (program arguments). Fails if it does not
    /// fit now.
    pub fn reserve(&mut self, device: DeviceId, bytes: u64) -> Result<(), SchedError> {
        let st = self.devices.get_mut(&device).ok_or(SchedError::UnknownDevice(device))?;
        if st.used + bytes > st.capacity {
            return Err(SchedError::ExceedsCapacity {
                device,
                bytes,
                capacity: st.capacity - st.used,
            });
        }
        st.used += bytes;
        Ok(())
    }

    /// Drop a client's queued gangs.
    pub fn cancel_client(&mut self, client: ClientId) -> Vec<Gang> {
        self.clients
            .get_mut(&client)
            .map(|c| c.queue.drain(..).map(|(_, _, g)| g).collect())
            .unwrap_or_default()
    }

    pub fn queued(&self) -> usize {
        self.clients.values().map(|c| c.queue.len()).sum()
    }

    pub fn queued_for(&self, client: ClientId) -> usize {
        self.clients.get(&client).map_or(0, |c| c.queue.len())
    }

    pub fn capacity(&self, device: DeviceId) -> u64 {
        self.devices.get(&device).map_or(0, |s| s.capacity)
    }

    pub fn used(&self, device: DeviceId) -> u64 {
        self.devices.get(&device).map_or(0, |s| s.used)
    }

    pub fn inflight(&self, device: DeviceId) -> u32 {
        self.devices.get(&device).map_or(0, |s| s.inflight)
    }

    /// Device time ticketed so far per client.
    pub fn charged(&self) -> BTreeMap<ClientId, u128> {
        self.clients.iter().map(|(id, c)| (*id, c.charged_ns)).collect()
    }

    pub fn devices(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.devices.keys().copied()
    }
}

/// Host-side check that gangs reach each device in ticket position order.
#[derive(Clone, Debug, Default)]
pub struct HostEnqueueGate {
    next: BTreeMap<DeviceId, u64>,
}

impl HostEnqueueGate {
    pub fn ready(&self, t: &Ticket, local: impl Fn(DeviceId) -> bool) -> bool {
        t.positions
            .iter()
            .filter(|(d, _)| local(*d))
            .all(|(d, p)| self.next.get(d).copied().unwrap_or(0) == *p)
    }

    pub fn commit(&mut self, t: &Ticket, local: impl Fn(DeviceId) -> bool) {
        for (d, p) in &t.positions {
            if local(*d) {
                self.next.insert(*d, p + 1);
            }
        }
    }
}
