//! Centralized resource manager: virtual slices and their mapping onto
//! physical devices.
//!
//! Placement is a simple static balance: a request goes to the island with
//! the lowest assignment load, then to that island's least-loaded devices,
//! ties broken by lowest id. Slices may share devices unless one of them
//! asked for exclusive use.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::{DeviceId, IslandId, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SliceId(pub u32);

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "slice{}", self.0)
    }
}

/// What a client asks for.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceRequest {
    pub shape: Vec<u32>,
    #[serde(default)]
    pub island: Option<IslandId>,
    #[serde(default)]
    pub exclusive: bool,
}

impl SliceRequest {
    pub fn new(shape: &[u32]) -> Self {
        SliceRequest {
            shape: shape.to_vec(),
            island: None,
            exclusive: false,
        }
    }

    pub fn on_island(mut self, island: IslandId) -> Self {
        self.island = Some(island);
        self
    }

    pub fn exclusive(mut self) -> Self {
        self.exclusive = true;
        self
    }

    pub fn device_count(&self) -> u32 {
        self.shape.iter().product()
    }
}

/// A client-visible group of virtual devices. Virtual device `i` maps to
/// entry `i` of the slice's device list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VirtualSlice {
    pub id: SliceId,
    pub shape: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub island: Option<IslandId>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exclusive: bool,
}

impl VirtualSlice {
    pub fn device_count(&self) -> u32 {
        self.shape.iter().product()
    }

    pub fn request(&self) -> SliceRequest {
        SliceRequest {
            shape: self.shape.clone(),
            island: self.island,
            exclusive: self.exclusive,
        }
    }
}

/// Virtual to physical assignment for every live slice.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceMap {
    pub entries: BTreeMap<SliceId, Vec<DeviceId>>,
}

impl DeviceMap {
    pub fn get(&self, slice: SliceId) -> Option<&[DeviceId]> {
        self.entries.get(&slice).map(Vec::as_slice)
    }

    pub fn insert(&mut self, slice: SliceId, devices: Vec<DeviceId>) {
        self.entries.insert(slice, devices);
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResmanError {
    #[error("slice shape {0:?} has no devices")]
    EmptyShape(Vec<u32>),
    #[error("cannot place {requested} devices; free devices per island: {available:?}")]
    Insufficient {
        requested: u32,
        available: Vec<(IslandId, u32)>,
    },
    #[error("unknown slice {0}")]
    UnknownSlice(SliceId),
    #[error("slice busy: {0} has running programs")]
    SliceBusy(SliceId),
    #[error("device {0:?} is assigned to a slice")]
    DeviceAssigned(DeviceId),
    #[error("device {0:?} is not managed")]
    UnknownDevice(DeviceId),
}

#[derive(Clone, Debug, Serialize)]
struct SliceState {
    slice: VirtualSlice,
    devices: Vec<DeviceId>,
    busy: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Allocation {
    Granted(VirtualSlice, Vec<DeviceId>),
    /// Queued until devices are released or added.
    Pending(SliceId),
}

#[derive(Clone, Debug, Serialize)]
pub struct ResourceManager {
    islands: BTreeMap<IslandId, Vec<DeviceId>>,
    load: BTreeMap<DeviceId, u32>,
    exclusive: BTreeMap<DeviceId, SliceId>,
    slices: BTreeMap<SliceId, SliceState>,
    #[serde(skip)]
    pending: VecDeque<(SliceId, SliceRequest)>,
    #[serde(skip)]
    granted: Vec<(VirtualSlice, Vec<DeviceId>)>,
    next_slice: u32,
}

impl ResourceManager {
    pub fn new(topo: &Topology) -> Self {
        let mut rm = ResourceManager {
            islands: BTreeMap::new(),
            load: BTreeMap::new(),
            exclusive: BTreeMap::new(),
            slices: BTreeMap::new(),
            pending: VecDeque::new(),
            granted: Vec::new(),
            next_slice: 0,
        };
        for island in &topo.islands {
            rm.add_devices(island.id, &island.devices);
        }
        rm
    }

    /// Devices a new request could use on `island`.
    fn eligible(&self, island: IslandId, exclusive: bool) -> Vec<DeviceId> {
        self.islands
            .get(&island)
            .into_iter()
            .flatten()
            .copied()
            .filter(|d| !self.exclusive.contains_key(d))
            .filter(|d| !exclusive || self.load[d] == 0)
            .collect()
    }

    fn island_load(&self, island: IslandId) -> (u64, u64) {
        let devs = &self.islands[&island];
        let total: u64 = devs.iter().map(|d| self.load[d] as u64).sum();
        (total, devs.len().max(1) as u64)
    }

    fn choose(&self, req: &SliceRequest) -> Option<Vec<DeviceId>> {
        let n = req.device_count() as usize;
        let mut best: Option<(IslandId, Vec<DeviceId>)> = None;
        for &island in self.islands.keys() {
            if req.island.is_some_and(|i| i != island) {
                continue;
            }
            let eligible = self.eligible(island, req.exclusive);
            if eligible.len() < n {
                continue;
            }
            let better = match &best {
                None => true,
                Some((b, _)) => {
                    // Compare load fractions without floating point.
                    let (lt, ld) = self.island_load(island);
                    let (bt, bd) = self.island_load(*b);
                    lt * bd < bt * ld
                }
            };
            if better {
                best = Some((island, eligible));
            }
        }
        let (_, mut eligible) = best?;
        eligible.sort_by_key(|d| (self.load[d], *d));
        eligible.truncate(n);
        eligible.sort();
        Some(eligible)
    }

    fn availability(&self) -> Vec<(IslandId, u32)> {
        self.islands
            .keys()
            .map(|&i| (i, self.eligible(i, true).len() as u32))
            .collect()
    }

    fn assign(&mut self, slice: &VirtualSlice, devices: &[DeviceId]) {
        for d in devices {
            *self.load.get_mut(d).expect("managed device") += 1;
            if slice.exclusive {
                self.exclusive.insert(*d, slice.id);
            }
        }
    }

    fn unassign(&mut self, slice: SliceId, devices: &[DeviceId]) {
        for d in devices {
            if let Some(l) = self.load.get_mut(d) {
                *l -= 1;
            }
            if self.exclusive.get(d) == Some(&slice) {
                self.exclusive.remove(d);
            }
        }
    }

    /// Place a slice now or fail.
    pub fn allocate_slice(&mut self, req: SliceRequest) -> Result<(VirtualSlice, Vec<DeviceId>), ResmanError> {
        if req.device_count() == 0 {
            return Err(ResmanError::EmptyShape(req.shape));
        }
        let devices = self.choose(&req).ok_or_else(|| ResmanError::Insufficient {
            requested: req.device_count(),
            available: self.availability(),
        })?;
        let id = SliceId(self.next_slice);
        self.next_slice += 1;
        Ok(self.install(id, req, devices))
    }

    fn install(&mut self, id: SliceId, req: SliceRequest, devices: Vec<DeviceId>) -> (VirtualSlice, Vec<DeviceId>) {
        let slice = VirtualSlice {
            id,
            shape: req.shape,
            island: req.island,
            exclusive: req.exclusive,
        };
        self.assign(&slice, &devices);
        self.slices.insert(
            id,
            SliceState {
                slice: slice.clone(),
                devices: devices.clone(),
                busy: 0,
            },
        );
        (slice, devices)
    }

    /// Like [`allocate_slice`](Self::allocate_slice), but a request that only
    /// fails because devices are held exclusively waits instead.
    pub fn request_slice(&mut self, req: SliceRequest) -> Result<Allocation, ResmanError> {
        match self.allocate_slice(req.clone()) {
            Ok((s, d)) => Ok(Allocation::Granted(s, d)),
            Err(ResmanError::Insufficient { requested, available }) => {
                let could_fit = self
                    .islands
                    .iter()
                    .any(|(i, devs)| req.island.is_none_or(|c| c == *i) && devs.len() >= requested as usize);
                if !could_fit {
                    return Err(ResmanError::Insufficient { requested, available });
                }
                let id = SliceId(self.next_slice);
                self.next_slice += 1;
                self.pending.push_back((id, req));
                Ok(Allocation::Pending(id))
            }
            Err(e) => Err(e),
        }
    }

    fn retry_pending(&mut self) {
        let mut still = VecDeque::new();
        while let Some((id, req)) = self.pending.pop_front() {
            match self.choose(&req) {
                Some(devices) => {
                    let g = self.install(id, req, devices);
                    self.granted.push(g);
                }
                None => still.push_back((id, req)),
            }
        }
        self.pending = still;
    }

    /// Pending requests satisfied since the last call.
    pub fn take_granted(&mut self) -> Vec<(VirtualSlice, Vec<DeviceId>)> {
        std::mem::take(&mut self.granted)
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn release_slice(&mut self, id: SliceId) -> Result<(), ResmanError> {
        let state = self.slices.get(&id).ok_or(ResmanError::UnknownSlice(id))?;
        if state.busy > 0 {
            return Err(ResmanError::SliceBusy(id));
        }
        let state = self.slices.remove(&id).unwrap();
        self.unassign(id, &state.devices);
        self.retry_pending();
        Ok(())
    }

    pub fn mark_busy(&mut self, id: SliceId) -> Result<(), ResmanError> {
        self.slices.get_mut(&id).ok_or(ResmanError::UnknownSlice(id))?.busy += 1;
        Ok(())
    }

    pub fn mark_idle(&mut self, id: SliceId) -> Result<(), ResmanError> {
        let s = self.slices.get_mut(&id).ok_or(ResmanError::UnknownSlice(id))?;
        s.busy = s.busy.saturating_sub(1);
        Ok(())
    }

    /// Reassign an idle slice under the current load. Programs using it must
    /// be lowered again.
    pub fn remap(&mut self, id: SliceId) -> Result<Vec<DeviceId>, ResmanError> {
        let state = self.slices.get(&id).ok_or(ResmanError::UnknownSlice(id))?;
        if state.busy > 0 {
            return Err(ResmanError::SliceBusy(id));
        }
        let state = self.slices.remove(&id).unwrap();
        self.unassign(id, &state.devices);
        let req = state.slice.request();
        match self.choose(&req) {
            Some(devices) => {
                self.install(id, req, devices.clone());
                Ok(devices)
            }
            None => {
                // Cannot happen for a slice that was placed before, unless
                // devices were removed; restore the old placement.
                self.install(id, req.clone(), state.devices);
                Err(ResmanError::Insufficient {
                    requested: req.device_count(),
                    available: self.availability(),
                })
            }
        }
    }

    pub fn add_devices(&mut self, island: IslandId, devices: &[DeviceId]) {
        let list = self.islands.entry(island).or_default();
        for &d in devices {
            if !list.contains(&d) {
                list.push(d);
                self.load.entry(d).or_insert(0);
            }
        }
        list.sort();
        self.retry_pending();
    }

    /// Only unassigned devices can be removed.
    pub fn remove_devices(&mut self, devices: &[DeviceId]) -> Result<(), ResmanError> {
        for d in devices {
            match self.load.get(d) {
                None => return Err(ResmanError::UnknownDevice(*d)),
                Some(&l) if l > 0 => return Err(ResmanError::DeviceAssigned(*d)),
                _ => {}
            }
        }
        for d in devices {
            self.load.remove(d);
            for list in self.islands.values_mut() {
                list.retain(|x| x != d);
            }
        }
        self.islands.retain(|_, l| !l.is_empty());
        Ok(())
    }

    pub fn device_map(&self) -> DeviceMap {
        DeviceMap {
            entries: self.slices.iter().map(|(id, s)| (*id, s.devices.clone())).collect(),
        }
    }

    pub fn slice(&self, id: SliceId) -> Option<&VirtualSlice> {
        self.slices.get(&id).map(|s| &s.slice)
    }

    pub fn devices_of(&self, id: SliceId) -> Option<&[DeviceId]> {
        self.slices.get(&id).map(|s| s.devices.as_slice())
    }

    /// Number of slices referencing `device`.
    pub fn load(&self, device: DeviceId) -> u32 {
        self.load.get(&device).copied().unwrap_or(0)
    }

    pub fn available_devices(&self) -> Vec<DeviceId> {
        let mut all: Vec<DeviceId> = self.islands.values().flatten().copied().collect();
        all.sort();
        all
    }

    /// Slices currently placed on `island`.
    pub fn slices_on(&self, island: IslandId) -> usize {
        let devs = self.islands.get(&island);
        self.slices
            .values()
            .filter(|s| devs.is_some_and(|d| s.devices.first().is_some_and(|x| d.contains(x))))
            .count()
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manager state serializes")
    }
}
