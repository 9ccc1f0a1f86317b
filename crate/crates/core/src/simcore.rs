//! Deterministic discrete-event simulation kernel.
//!
//! Every component of the runtime is a logical process addressed by a
//! [`ProcessId`]. Processes never share mutable state; they exchange
//! timestamped messages through an [`EventQueue`]. Events firing at the same
//! virtual instant are processed in the order they were scheduled, which makes
//! a run a pure function of its configuration.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// Nanoseconds of simulated time since the start of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn from_micros(us: u64) -> Self {
        VirtualTime(us * 1_000)
    }

    pub fn from_millis(ms: u64) -> Self {
        VirtualTime(ms * 1_000_000)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }
}

impl Add<u64> for VirtualTime {
    type Output = VirtualTime;

    fn add(self, ns: u64) -> VirtualTime {
        VirtualTime(self.0 + ns)
    }
}

impl Sub for VirtualTime {
    type Output = u64;

    fn sub(self, rhs: VirtualTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    Client,
    ResourceManager,
    Scheduler,
    HostExecutor,
    Device,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LogicalProcess {
    pub id: ProcessId,
    pub kind: ProcessKind,
}

/// Handle returned by [`EventQueue::schedule`]; can be used to cancel the event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

/// Message payloads carried by events.
///
/// The digest only has to be stable within one build; it is used to compare
/// event logs of repeated runs.
pub trait Payload: Hash {
    fn kind(&self) -> &'static str;

    fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }
}

/// An event as seen by the receiving process.
#[derive(Debug, Clone)]
pub struct SimEvent<M> {
    pub id: EventId,
    pub fire_at: VirtualTime,
    pub target: ProcessId,
    pub from: Option<ProcessId>,
    pub payload: M,
}

struct Queued<M> {
    fire_at: VirtualTime,
    seq: u64,
    target: ProcessId,
    from: Option<ProcessId>,
    payload: M,
}

impl<M> PartialEq for Queued<M> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<M> Eq for Queued<M> {}

impl<M> PartialOrd for Queued<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for Queued<M> {
    // Reversed so that `BinaryHeap` pops the earliest (fire_at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// The pending-event set plus the clock. Handed to the model on every event.
pub struct EventQueue<M> {
    heap: BinaryHeap<Queued<M>>,
    clock: VirtualTime,
    next_seq: u64,
    cancelled: HashSet<u64>,
    channels: HashMap<(ProcessId, ProcessId), VirtualTime>,
    processes: Vec<ProcessKind>,
}

impl<M> EventQueue<M> {
    fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            clock: VirtualTime::ZERO,
            next_seq: 0,
            cancelled: HashSet::new(),
            channels: HashMap::new(),
            processes: Vec::new(),
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.clock
    }

    /// Queue `payload` for `target` at `fire_at`.
    ///
    /// # Panics
    ///
    /// Scheduling in the past is a programming error and panics.
    pub fn schedule(&mut self, fire_at: VirtualTime, target: ProcessId, payload: M) -> EventId {
        self.push(fire_at, target, None, payload)
    }

    /// Queue `payload` for `target` after `delay_ns`.
    pub fn schedule_in(&mut self, delay_ns: u64, target: ProcessId, payload: M) -> EventId {
        let at = self.clock + delay_ns;
        self.push(at, target, None, payload)
    }

    /// Send a message over the `(from, to)` channel. Delivery on one channel is
    /// FIFO: a message never overtakes an earlier one sent on the same channel,
    /// even if it was given a smaller delay.
    pub fn send(&mut self, from: ProcessId, to: ProcessId, delay_ns: u64, payload: M) -> EventId {
        let requested = self.clock + delay_ns;
        let last = self.channels.entry((from, to)).or_insert(VirtualTime::ZERO);
        let at = requested.max(*last);
        *last = at;
        self.push(at, to, Some(from), payload)
    }

    pub fn cancel(&mut self, id: EventId) {
        self.cancelled.insert(id.0);
    }

    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len().min(self.heap.len())
    }

    pub fn process_kind(&self, id: ProcessId) -> Option<ProcessKind> {
        self.processes.get(id.0 as usize).copied()
    }

    fn push(&mut self, fire_at: VirtualTime, target: ProcessId, from: Option<ProcessId>, payload: M) -> EventId {
        assert!(
            fire_at >= self.clock,
            "event for {target} scheduled at {fire_at}, before the current clock {}",
            self.clock
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued {
            fire_at,
            seq,
            target,
            from,
            payload,
        });
        EventId(seq)
    }

    fn pop(&mut self) -> Option<Queued<M>> {
        while let Some(ev) = self.heap.pop() {
            if self.cancelled.remove(&ev.seq) {
                continue;
            }
            return Some(ev);
        }
        None
    }
}

/// A process that cannot make progress, and the processes it waits for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockedProcess {
    pub process: ProcessId,
    pub waiting_on: Vec<ProcessId>,
    pub reason: String,
}

/// Behaviour driven by the event loop.
pub trait Model {
    type Msg: Payload;

    fn handle(&mut self, queue: &mut EventQueue<Self::Msg>, event: SimEvent<Self::Msg>);

    /// Processes still waiting on something. Consulted once the queue drains:
    /// a non-empty answer means the run ended in deadlock.
    fn blocked(&self) -> Vec<BlockedProcess>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Quiescent,
    Deadlock { blocked: Vec<BlockedProcess> },
}

impl RunStatus {
    pub fn is_deadlock(&self) -> bool {
        matches!(self, RunStatus::Deadlock { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunOutcome {
    pub clock: VirtualTime,
    pub status: RunStatus,
}

/// One line of the newline-delimited event log.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogEntry {
    pub t_ns: u64,
    pub seq: u64,
    pub target: u32,
    pub kind: String,
    pub payload_digest: u64,
}

/// Per-kind aggregate of the event stream; kept even when the full log is off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct KindStats {
    pub count: u64,
    pub first_ns: u64,
    pub last_ns: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LogSummary {
    pub events: u64,
    pub by_kind: BTreeMap<&'static str, KindStats>,
}

impl LogSummary {
    fn record(&mut self, kind: &'static str, t: VirtualTime) {
        self.events += 1;
        let stats = self.by_kind.entry(kind).or_insert(KindStats {
            count: 0,
            first_ns: t.0,
            last_ns: t.0,
        });
        stats.count += 1;
        stats.last_ns = t.0;
    }

    pub fn kind(&self, kind: &str) -> KindStats {
        self.by_kind.get(kind).copied().unwrap_or_default()
    }
}

pub struct Simulation<M> {
    queue: EventQueue<M>,
    log: Option<Vec<LogEntry>>,
    summary: LogSummary,
    processed: u64,
}

impl<M: Payload> Default for Simulation<M> {
    fn default() -> Self {
        Self::new()
    }
}

impl<M: Payload> Simulation<M> {
    pub fn new() -> Self {
        Simulation {
            queue: EventQueue::new(),
            log: None,
            summary: LogSummary::default(),
            processed: 0,
        }
    }

    /// Keep every processed event in memory for [`Simulation::write_log`].
    pub fn with_event_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn add_process(&mut self, kind: ProcessKind) -> ProcessId {
        let id = ProcessId(self.queue.processes.len() as u32);
        self.queue.processes.push(kind);
        id
    }

    pub fn processes(&self) -> impl Iterator<Item = LogicalProcess> + '_ {
        self.queue
            .processes
            .iter()
            .enumerate()
            .map(|(i, &kind)| LogicalProcess {
                id: ProcessId(i as u32),
                kind,
            })
    }

    pub fn now(&self) -> VirtualTime {
        self.queue.clock
    }

    pub fn queue(&mut self) -> &mut EventQueue<M> {
        &mut self.queue
    }

    pub fn schedule(&mut self, fire_at: VirtualTime, target: ProcessId, payload: M) -> EventId {
        self.queue.schedule(fire_at, target, payload)
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn summary(&self) -> &LogSummary {
        &self.summary
    }

    pub fn log(&self) -> Option<&[LogEntry]> {
        self.log.as_deref()
    }

    pub fn take_log(&mut self) -> Option<Vec<LogEntry>> {
        self.log.take()
    }

    /// Process events until none remain, then classify the final state.
    pub fn run_until_quiescent<W: Model<Msg = M>>(&mut self, model: &mut W) -> RunOutcome {
        while self.step(model) {}
        let blocked = model.blocked();
        let status = if blocked.is_empty() {
            RunStatus::Quiescent
        } else {
            RunStatus::Deadlock { blocked }
        };
        RunOutcome {
            clock: self.queue.clock,
            status,
        }
    }

    /// Process events with `fire_at <= until`.
    pub fn run_until<W: Model<Msg = M>>(&mut self, model: &mut W, until: VirtualTime) {
        loop {
            match self.queue.heap.peek() {
                Some(ev) if ev.fire_at <= until => {}
                _ => break,
            }
            if !self.step(model) {
                break;
            }
        }
    }

    /// Process a single event. Returns false once the queue is empty.
    pub fn step<W: Model<Msg = M>>(&mut self, model: &mut W) -> bool {
        let Some(ev) = self.queue.pop() else {
            return false;
        };
        debug_assert!(ev.fire_at >= self.queue.clock);
        self.queue.clock = ev.fire_at;
        self.processed += 1;
        let kind = ev.payload.kind();
        self.summary.record(kind, ev.fire_at);
        if let Some(log) = self.log.as_mut() {
            log.push(LogEntry {
                t_ns: ev.fire_at.0,
                seq: ev.seq,
                target: ev.target.0,
                kind: kind.to_string(),
                payload_digest: ev.payload.digest(),
            });
        }
        model.handle(
            &mut self.queue,
            SimEvent {
                id: EventId(ev.seq),
                fire_at: ev.fire_at,
                target: ev.target,
                from: ev.from,
                payload: ev.payload,
            },
        );
        true
    }

    /// Dump the event log as newline-delimited JSON.
    pub fn write_log<W: Write>(&self, mut out: W) -> io::Result<()> {
        for entry in self.log.iter().flatten() {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Wait-for graph over blocked processes. Used as an independent check of
/// the deadlock classification: a deadlock must contain a cycle.
#[derive(Clone, Debug, Default)]
pub struct WaitForGraph {
    edges: BTreeMap<ProcessId, BTreeSet<ProcessId>>,
}

impl WaitForGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_blocked(blocked: &[BlockedProcess]) -> Self {
        let mut g = WaitForGraph::new();
        for b in blocked {
            g.edges.entry(b.process).or_default();
            for &w in &b.waiting_on {
                g.add_edge(b.process, w);
            }
        }
        g
    }

    pub fn add_edge(&mut self, waiter: ProcessId, holder: ProcessId) {
        self.edges.entry(waiter).or_default().insert(holder);
    }

    /// Some cycle of the graph, if one exists.
    pub fn find_cycle(&self) -> Option<Vec<ProcessId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: BTreeMap<ProcessId, Mark> = BTreeMap::new();
        for &root in self.edges.keys() {
            if marks.contains_key(&root) {
                continue;
            }
            // Iterative DFS; `path` mirrors the open nodes on the stack.
            let mut stack: Vec<(ProcessId, Vec<ProcessId>)> = vec![(root, self.succ(root))];
            let mut path = vec![root];
            marks.insert(root, Mark::Open);
            while let Some((node, succs)) = stack.last_mut() {
                if let Some(next) = succs.pop() {
                    match marks.get(&next) {
                        Some(Mark::Open) => {
                            let start = path.iter().position(|&p| p == next).unwrap();
                            return Some(path[start..].to_vec());
                        }
                        Some(Mark::Done) => {}
                        None => {
                            marks.insert(next, Mark::Open);
                            path.push(next);
                            let s = self.succ(next);
                            stack.push((next, s));
                        }
                    }
                } else {
                    marks.insert(*node, Mark::Done);
                    path.pop();
                    stack.pop();
                }
            }
        }
        None
    }

    pub fn has_cycle(&self) -> bool {
        self.find_cycle().is_some()
    }

    fn succ(&self, p: ProcessId) -> Vec<ProcessId> {
        self.edges
            .get(&p)
            .map(|s| s.iter().rev().copied().collect())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, Hash, PartialEq)]
    enum Msg {
        Tag(&'static str),
        Ping { hops: u32 },
    }

    impl Payload for Msg {
        fn kind(&self) -> &'static str {
            match self {
                Msg::Tag(_) => "tag",
                Msg::Ping { .. } => "ping",
            }
        }
    }

    #[derive(Default)]
    struct Recorder {
        seen: Vec<(VirtualTime, Msg)>,
        peer: Option<ProcessId>,
        stuck: Vec<BlockedProcess>,
    }

    impl Model for Recorder {
        type Msg = Msg;

        fn handle(&mut self, q: &mut EventQueue<Msg>, ev: SimEvent<Msg>) {
            if let Msg::Ping { hops } = ev.payload {
                if hops > 0 {
                    let peer = self.peer.unwrap();
                    q.send(ev.target, peer, 1_000, Msg::Ping { hops: hops - 1 });
                }
            }
            self.seen.push((q.now(), ev.payload));
        }

        fn blocked(&self) -> Vec<BlockedProcess> {
            self.stuck.clone()
        }
    }

    #[test]
    fn empty_simulation_is_quiescent_at_zero() {
        let mut sim = Simulation::<Msg>::new();
        assert_eq!(sim.now(), VirtualTime::ZERO);
        let out = sim.run_until_quiescent(&mut Recorder::default());
        assert_eq!(out.clock, VirtualTime::ZERO);
        assert_eq!(out.status, RunStatus::Quiescent);
    }

    #[test]
    fn equal_timestamps_fire_in_schedule_order() {
        let mut sim = Simulation::new();
        let p = sim.add_process(ProcessKind::Device);
        sim.schedule(VirtualTime::ZERO, p, Msg::Tag("A"));
        sim.schedule(VirtualTime::ZERO, p, Msg::Tag("B"));
        let mut rec = Recorder::default();
        sim.run_until_quiescent(&mut rec);
        let tags: Vec<_> = rec.seen.iter().map(|(_, m)| m.clone()).collect();
        assert_eq!(tags, vec![Msg::Tag("A"), Msg::Tag("B")]);
    }

    #[test]
    fn future_event_fires_when_clock_reaches_it() {
        let mut sim = Simulation::new();
        let p = sim.add_process(ProcessKind::Device);
        sim.schedule(VirtualTime::from_millis(1), p, Msg::Tag("now"));
        let mut rec = Recorder::default();
        sim.run_until(&mut rec, VirtualTime::from_millis(1));
        assert_eq!(sim.now(), VirtualTime::from_millis(1));
        sim.queue().schedule(VirtualTime::from_millis(5), p, Msg::Tag("X"));
        sim.run_until(&mut rec, VirtualTime::from_millis(3));
        assert_eq!(rec.seen.len(), 1);
        let out = sim.run_until_quiescent(&mut rec);
        assert_eq!(out.clock, VirtualTime::from_millis(5));
        assert_eq!(rec.seen[1], (VirtualTime::from_millis(5), Msg::Tag("X")));
    }

    #[test]
    #[should_panic(expected = "before the current clock")]
    fn scheduling_in_the_past_panics() {
        let mut sim = Simulation::new();
        let p = sim.add_process(ProcessKind::Device);
        sim.schedule(VirtualTime::from_millis(3), p, Msg::Tag("x"));
        sim.run_until_quiescent(&mut Recorder::default());
        sim.schedule(VirtualTime::from_millis(1), p, Msg::Tag("late"));
    }

    #[test]
    fn cancelled_events_do_not_fire() {
        let mut sim = Simulation::new();
        let p = sim.add_process(ProcessKind::Device);
        let id = sim.schedule(VirtualTime(10), p, Msg::Tag("gone"));
        sim.schedule(VirtualTime(20), p, Msg::Tag("kept"));
        sim.queue().cancel(id);
        let mut rec = Recorder::default();
        sim.run_until_quiescent(&mut rec);
        assert_eq!(rec.seen, vec![(VirtualTime(20), Msg::Tag("kept"))]);
    }

    #[test]
    fn clock_never_decreases() {
        let mut sim = Simulation::new();
        let p = sim.add_process(ProcessKind::Device);
        for t in [50u64, 10, 30, 10, 0, 70] {
            sim.schedule(VirtualTime(t), p, Msg::Tag("t"));
        }
        let mut rec = Recorder::default();
        let mut last = sim.now();
        while sim.step(&mut rec) {
            assert!(sim.now() >= last);
            last = sim.now();
        }
    }

    #[test]
    fn channel_delivery_is_fifo_even_with_shorter_delay() {
        let mut sim = Simulation::new();
        let a = sim.add_process(ProcessKind::HostExecutor);
        let b = sim.add_process(ProcessKind::HostExecutor);
        let c = sim.add_process(ProcessKind::HostExecutor);
        let q = sim.queue();
        q.send(a, b, 500, Msg::Tag("slow"));
        q.send(a, b, 10, Msg::Tag("fast"));
        // A different channel is not held back.
        q.send(c, b, 10, Msg::Tag("other"));
        let mut rec = Recorder::default();
        sim.run_until_quiescent(&mut rec);
        let order: Vec<_> = rec.seen.iter().map(|(_, m)| m.clone()).collect();
        assert_eq!(order, vec![Msg::Tag("other"), Msg::Tag("slow"), Msg::Tag("fast")]);
        assert_eq!(rec.seen[2].0, VirtualTime(500));
    }

    fn ping_pong_log() -> Vec<LogEntry> {
        let mut sim = Simulation::new().with_event_log();
        let a = sim.add_process(ProcessKind::Client);
        let b = sim.add_process(ProcessKind::Scheduler);
        sim.schedule(VirtualTime::ZERO, a, Msg::Ping { hops: 20 });
        let mut rec = Recorder {
            peer: Some(b),
            ..Default::default()
        };
        sim.run_until_quiescent(&mut rec);
        sim.take_log().unwrap()
    }

    #[test]
    fn identical_runs_produce_identical_logs() {
        let first = ping_pong_log();
        let second = ping_pong_log();
        assert_eq!(first.len(), 21);
        assert_eq!(first, second);
        let mut buf = Vec::new();
        let mut sim = Simulation::<Msg>::new().with_event_log();
        let p = sim.add_process(ProcessKind::Device);
        sim.schedule(VirtualTime(7), p, Msg::Tag("x"));
        sim.run_until_quiescent(&mut Recorder::default());
        sim.write_log(&mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        let parsed: LogEntry = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(parsed.t_ns, 7);
        assert_eq!(parsed.kind, "tag");
    }

    #[test]
    fn blocked_processes_report_deadlock() {
        let mut sim = Simulation::<Msg>::new();
        let mut rec = Recorder {
            stuck: vec![BlockedProcess {
                process: ProcessId(0),
                waiting_on: vec![ProcessId(1)],
                reason: "collective".into(),
            }],
            ..Default::default()
        };
        let out = sim.run_until_quiescent(&mut rec);
        assert!(out.status.is_deadlock());
    }

    #[test]
    fn wait_for_cycle_detection() {
        let mut g = WaitForGraph::new();
        g.add_edge(ProcessId(0), ProcessId(1));
        g.add_edge(ProcessId(1), ProcessId(2));
        assert!(!g.has_cycle());
        g.add_edge(ProcessId(2), ProcessId(0));
        let cycle = g.find_cycle().unwrap();
        assert_eq!(cycle.len(), 3);
        let mut self_loop = WaitForGraph::new();
        self_loop.add_edge(ProcessId(4), ProcessId(4));
        assert_eq!(self_loop.find_cycle(), Some(vec![ProcessId(4)]));
    }
}
