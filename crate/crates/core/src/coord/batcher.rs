use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::simcore::VirtualTime;

/// Flush after `max_messages` or `max_delay_ns`, whichever comes first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPolicy {
    pub max_messages: usize,
    pub max_delay_ns: u64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy {
            max_messages: 16,
            max_delay_ns: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Enqueued<M> {
    /// The batch is full; send these now.
    Flush(Vec<M>),
    /// First message of a new batch; call `on_timer` at `deadline`.
    Armed {
        deadline: VirtualTime,
        token: u64,
    },
    Queued,
}

#[derive(Clone, Debug)]
struct Pending<M> {
    msgs: Vec<M>,
    token: u64,
}

/// Groups non-critical messages per destination. Critical messages skip
/// the queue, but first flush it so that per-destination order holds.
#[derive(Clone, Debug)]
pub struct MessageBatcher<K: Ord, M> {
    policy: BatchPolicy,
    pending: BTreeMap<K, Pending<M>>,
    next_token: u64,
    flushed: u64,
}

impl<K: Ord + Copy, M> MessageBatcher<K, M> {
    pub fn new(policy: BatchPolicy) -> Self {
        MessageBatcher {
            policy,
            pending: BTreeMap::new(),
            next_token: 0,
            flushed: 0,
        }
    }

    pub fn policy(&self) -> BatchPolicy {
        self.policy
    }

    pub fn push(&mut self, now: VirtualTime, dest: K, msg: M) -> Enqueued<M> {
        if self.policy.max_messages <= 1 {
            self.flushed += 1;
            return Enqueued::Flush(vec![msg]);
        }
        match self.pending.get_mut(&dest) {
            Some(p) => {
                p.msgs.push(msg);
                if p.msgs.len() >= self.policy.max_messages {
                    self.flushed += 1;
                    Enqueued::Flush(self.pending.remove(&dest).unwrap().msgs)
                } else {
                    Enqueued::Queued
                }
            }
            None => {
                self.next_token += 1;
                let token = self.next_token;
                self.pending.insert(dest, Pending { msgs: vec![msg], token });
                Enqueued::Armed {
                    deadline: now + self.policy.max_delay_ns,
                    token,
                }
            }
        }
    }

    /// Timer for `token` fired. Stale tokens (batch already flushed) yield
    /// nothing.
    pub fn on_timer(&mut self, dest: K, token: u64) -> Option<Vec<M>> {
        match self.pending.get(&dest) {
            Some(p) if p.token == token => {
                self.flushed += 1;
                Some(self.pending.remove(&dest).unwrap().msgs)
            }
            _ => None,
        }
    }

    /// Called before a critical send to `dest`.
    pub fn flush_before_critical(&mut self, dest: K) -> Option<Vec<M>> {
        let p = self.pending.remove(&dest)?;
        self.flushed += 1;
        Some(p.msgs)
    }

    pub fn pending(&self, dest: K) -> usize {
        self.pending.get(&dest).map_or(0, |p| p.msgs.len())
    }

    /// Batches sent so far.
    pub fn flushes(&self) -> u64 {
        self.flushed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const US: u64 = 1_000;

    #[test]
    fn ten_messages_flush_once_at_deadline() {
        let mut b = MessageBatcher::new(BatchPolicy::default());
        let Enqueued::Armed { deadline, token } = b.push(VirtualTime::ZERO, 1u32, 0) else {
            panic!()
        };
        assert_eq!(deadline, VirtualTime(100 * US));
        for i in 1..10 {
            assert_eq!(b.push(VirtualTime(i * US), 1, i), Enqueued::Queued);
        }
        assert_eq!(b.on_timer(1, token), Some((0..10).collect()));
        assert_eq!(b.flushes(), 1);
    }

    #[test]
    fn sixteenth_message_flushes_immediately() {
        let mut b = MessageBatcher::new(BatchPolicy::default());
        let Enqueued::Armed { token, .. } = b.push(VirtualTime::ZERO, 1u32, 0) else {
            panic!()
        };
        for i in 1..15 {
            b.push(VirtualTime(i * US), 1, i);
        }
        let Enqueued::Flush(batch) = b.push(VirtualTime(40 * US), 1, 15) else {
            panic!("16th message must flush")
        };
        assert_eq!(batch.len(), 16);
        assert_eq!(b.on_timer(1, token), None);
    }

    #[test]
    fn critical_send_drains_only_its_destination() {
        let mut b = MessageBatcher::new(BatchPolicy::default());
        b.push(VirtualTime::ZERO, 1u32, 'a');
        b.push(VirtualTime::ZERO, 2u32, 'b');
        assert_eq!(b.flush_before_critical(1), Some(vec!['a']));
        assert_eq!(b.flush_before_critical(1), None);
        assert_eq!(b.pending(2), 1);
    }
}
