//! Per-host sharded object store.
//!
//! A logical buffer is one handle over N shards. Reference counts live on the
//! logical buffer, so bookkeeping costs one operation per logical operation
//! whatever N is. Shard locations are only visible through resolved futures;
//! the handle itself is an opaque id, which lets a shard move without the
//! handle changing.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::hardware::{BufferId, DeviceId, HostId};
use crate::ids::OwnerLabel;
use crate::simcore::VirtualTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ObjectHandle(pub u64);

impl ObjectHandle {
    /// Host whose store holds the logical buffer.
    pub fn home(self) -> HostId {
        HostId(((self.0 >> 40) - 1) as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ShardLocation {
    Device { device: DeviceId, buffer: BufferId },
    HostMemory { host: HostId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ShardHandle {
    pub location: ShardLocation,
    pub bytes: u64,
}

impl ShardHandle {
    pub fn device(device: DeviceId, buffer: BufferId, bytes: u64) -> Self {
        ShardHandle {
            location: ShardLocation::Device { device, buffer },
            bytes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FutureState {
    Pending,
    Resolved,
    Failed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("unknown handle {0:?}")]
    UnknownHandle(ObjectHandle),
    #[error("reference count of {0:?} would drop below zero")]
    Underflow(ObjectHandle),
    #[error("{0:?} was garbage collected")]
    Collected(ObjectHandle),
    #[error("shard {shard} of {handle:?} is out of range or already resolved")]
    BadShard { handle: ObjectHandle, shard: usize },
}

/// One shard freed, for double-free audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct StoreFree {
    pub handle: ObjectHandle,
    pub shard: u32,
    pub at: VirtualTime,
}

#[derive(Clone, Debug)]
struct Entry {
    shards: Vec<Option<ShardHandle>>,
    refcount: u32,
    owner: OwnerLabel,
}

#[derive(Clone, Debug)]
pub struct ObjectStore {
    host: HostId,
    next: u64,
    entries: BTreeMap<ObjectHandle, Entry>,
    freed: BTreeSet<ObjectHandle>,
    collected: BTreeSet<ObjectHandle>,
    refcount_ops: u64,
    free_log: Vec<StoreFree>,
}

impl ObjectStore {
    pub fn new(host: HostId) -> Self {
        ObjectStore {
            host,
            next: 0,
            entries: BTreeMap::new(),
            freed: BTreeSet::new(),
            collected: BTreeSet::new(),
            refcount_ops: 0,
            free_log: Vec::new(),
        }
    }

    pub fn host(&self) -> HostId {
        self.host
    }

    fn fresh(&mut self) -> ObjectHandle {
        self.next += 1;
        ObjectHandle(((self.host.0 as u64 + 1) << 40) | self.next)
    }

    /// Register a buffer whose shards are already allocated.
    pub fn put(&mut self, shards: Vec<ShardHandle>, owner: OwnerLabel) -> ObjectHandle {
        let h = self.fresh();
        self.entries.insert(
            h,
            Entry {
                shards: shards.into_iter().map(Some).collect(),
                refcount: 1,
                owner,
            },
        );
        h
    }

    /// Register a buffer whose shards will be allocated later.
    pub fn put_pending(&mut self, shards: usize, owner: OwnerLabel) -> ObjectHandle {
        let h = self.fresh();
        self.entries.insert(
            h,
            Entry {
                shards: vec![None; shards],
                refcount: 1,
                owner,
            },
        );
        h
    }

    fn entry_mut(&mut self, h: ObjectHandle) -> Result<&mut Entry, StoreError> {
        if self.collected.contains(&h) {
            return Err(StoreError::Collected(h));
        }
        self.entries.get_mut(&h).ok_or(if self.freed.contains(&h) {
            StoreError::Underflow(h)
        } else {
            StoreError::UnknownHandle(h)
        })
    }

    pub fn resolve(&mut self, h: ObjectHandle, shard: usize, loc: ShardHandle) -> Result<(), StoreError> {
        let e = self.entry_mut(h)?;
        match e.shards.get_mut(shard) {
            Some(slot @ None) => {
                *slot = Some(loc);
                Ok(())
            }
            _ => Err(StoreError::BadShard { handle: h, shard }),
        }
    }

    /// State of the future for the whole logical buffer.
    pub fn future(&self, h: ObjectHandle) -> FutureState {
        if self.collected.contains(&h) {
            return FutureState::Failed;
        }
        match self.entries.get(&h) {
            Some(e) if e.shards.iter().all(Option::is_some) => FutureState::Resolved,
            Some(_) => FutureState::Pending,
            None => FutureState::Failed,
        }
    }

    /// Location of one shard, once resolved.
    pub fn shard(&self, h: ObjectHandle, shard: usize) -> Option<ShardHandle> {
        self.entries.get(&h)?.shards.get(shard).copied().flatten()
    }

    /// Move a shard; the handle stays valid.
    pub fn migrate(&mut self, h: ObjectHandle, shard: usize, to: ShardHandle) -> Result<ShardHandle, StoreError> {
        let e = self.entry_mut(h)?;
        match e.shards.get_mut(shard) {
            Some(Some(old)) => Ok(std::mem::replace(old, to)),
            _ => Err(StoreError::BadShard { handle: h, shard }),
        }
    }

    pub fn add_ref(&mut self, h: ObjectHandle) -> Result<(), StoreError> {
        self.entry_mut(h)?.refcount += 1;
        self.refcount_ops += 1;
        Ok(())
    }

    /// Drop one reference. At zero the buffer is removed and its resolved
    /// shards are returned for the caller to free on their devices.
    pub fn release(&mut self, h: ObjectHandle, now: VirtualTime) -> Result<Option<Vec<ShardHandle>>, StoreError> {
        let e = self.entry_mut(h)?;
        e.refcount -= 1;
        let left = e.refcount;
        self.refcount_ops += 1;
        if left > 0 {
            return Ok(None);
        }
        let e = self.entries.remove(&h).unwrap();
        self.freed.insert(h);
        Ok(Some(self.log_free(h, e, now)))
    }

    fn log_free(&mut self, h: ObjectHandle, e: Entry, now: VirtualTime) -> Vec<ShardHandle> {
        let mut out = Vec::with_capacity(e.shards.len());
        for (i, s) in e.shards.into_iter().enumerate() {
            if let Some(s) = s {
                self.free_log.push(StoreFree {
                    handle: h,
                    shard: i as u32,
                    at: now,
                });
                out.push(s);
            }
        }
        out
    }

    /// Release every buffer owned by `owner` regardless of its count.
    /// Futures on those buffers fail.
    pub fn gc_owner(&mut self, owner: OwnerLabel, now: VirtualTime) -> Vec<(ObjectHandle, Vec<ShardHandle>)> {
        let victims: Vec<ObjectHandle> = self
            .entries
            .iter()
            .filter(|(_, e)| e.owner == owner)
            .map(|(h, _)| *h)
            .collect();
        let mut out = Vec::with_capacity(victims.len());
        for h in victims {
            let e = self.entries.remove(&h).unwrap();
            self.collected.insert(h);
            out.push((h, self.log_free(h, e, now)));
        }
        out
    }

    pub fn set_owner(&mut self, h: ObjectHandle, owner: OwnerLabel) -> Result<(), StoreError> {
        self.entry_mut(h)?.owner = owner;
        Ok(())
    }

    pub fn owner(&self, h: ObjectHandle) -> Option<OwnerLabel> {
        self.entries.get(&h).map(|e| e.owner)
    }

    pub fn refcount(&self, h: ObjectHandle) -> Option<u32> {
        self.entries.get(&h).map(|e| e.refcount)
    }

    pub fn refcount_ops(&self) -> u64 {
        self.refcount_ops
    }

    pub fn live(&self) -> usize {
        self.entries.len()
    }

    pub fn live_owned_by(&self, owner: OwnerLabel) -> usize {
        self.entries.values().filter(|e| e.owner == owner).count()
    }

    pub fn free_log(&self) -> &[StoreFree] {
        &self.free_log
    }
}

/// Number of (handle, shard) pairs freed more than once.
pub fn double_frees(log: &[StoreFree]) -> usize {
    let mut seen = BTreeSet::new();
    log.iter().filter(|f| !seen.insert((f.handle, f.shard))).count()
}
