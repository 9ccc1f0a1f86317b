use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::HardwareError;
use crate::ids::OwnerLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BufferId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AllocRequestId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocOutcome {
    Granted(BufferId),
    /// Queued; the grant is reported when space frees up.
    WouldBlock(AllocRequestId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grant {
    pub request: AllocRequestId,
    pub buffer: BufferId,
    pub bytes: u64,
}

#[derive(Clone, Debug)]
struct Waiter {
    request: AllocRequestId,
    bytes: u64,
    owner: OwnerLabel,
}

/// Device memory with a FIFO back-pressure queue.
///
/// Once a request is waiting, later requests queue behind it even if they
/// would fit, so grants happen in arrival order.
#[derive(Clone, Debug)]
pub struct HbmPool {
    capacity: u64,
    allocated: u64,
    live: BTreeMap<BufferId, (u64, OwnerLabel)>,
    waiters: VecDeque<Waiter>,
}

impl HbmPool {
    pub fn new(capacity: u64) -> Self {
        HbmPool {
            capacity,
            allocated: 0,
            live: BTreeMap::new(),
            waiters: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity - self.allocated
    }

    pub fn live_buffers(&self) -> usize {
        self.live.len()
    }

    pub fn waiting(&self) -> usize {
        self.waiters.len()
    }

    /// `next_id` supplies globally unique ids for buffers and requests.
    pub fn alloc(&mut self, bytes: u64, owner: OwnerLabel, next_id: &mut u64) -> Result<AllocOutcome, HardwareError> {
        if bytes > self.capacity {
            return Err(HardwareError::ExceedsCapacity {
                requested: bytes,
                capacity: self.capacity,
            });
        }
        *next_id += 1;
        if self.waiters.is_empty() && bytes <= self.free_bytes() {
            let id = BufferId(*next_id);
            self.allocated += bytes;
            self.live.insert(id, (bytes, owner));
            Ok(AllocOutcome::Granted(id))
        } else {
            let request = AllocRequestId(*next_id);
            self.waiters.push_back(Waiter { request, bytes, owner });
            Ok(AllocOutcome::WouldBlock(request))
        }
    }

    /// Free a buffer and grant whatever waiters now fit, in FIFO order.
    pub fn free(&mut self, buffer: BufferId, next_id: &mut u64) -> Result<Vec<Grant>, HardwareError> {
        let (bytes, _) = self.live.remove(&buffer).ok_or(HardwareError::UnknownBuffer(buffer))?;
        self.allocated -= bytes;
        let mut grants = Vec::new();
        while let Some(w) = self.waiters.front() {
            if w.bytes > self.free_bytes() {
                break;
            }
            let w = self.waiters.pop_front().unwrap();
            *next_id += 1;
            let id = BufferId(*next_id);
            self.allocated += w.bytes;
            self.live.insert(id, (w.bytes, w.owner));
            grants.push(Grant {
                request: w.request,
                buffer: id,
                bytes: w.bytes,
            });
        }
        Ok(grants)
    }

    pub fn owner(&self, buffer: BufferId) -> Option<OwnerLabel> {
        self.live.get(&buffer).map(|(_, o)| *o)
    }

    pub fn bytes_of(&self, buffer: BufferId) -> Option<u64> {
        self.live.get(&buffer).map(|(b, _)| *b)
    }
}
