use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::CoordError;
use crate::ids::InstanceId;
use crate::ir::{EdgeId, NodeId, ProgramGraph};

/// Data sent along a sharded edge, tagged with its destination shard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct DataTuple {
    pub edge: EdgeId,
    pub instance: InstanceId,
    pub src: u32,
    pub dst: u32,
    pub bytes: u64,
}

/// End of a source shard's output on one edge. Destinations missing from
/// `counts` receive nothing from this source.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Punctuation {
    pub edge: EdgeId,
    pub instance: InstanceId,
    pub src: u32,
    pub counts: BTreeMap<u32, u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ShardReady {
    pub node: NodeId,
    pub instance: InstanceId,
    pub shard: u32,
}

/// Which source shards a destination shard waits for on one edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Senders {
    /// Every source shard punctuates every destination shard.
    All,
    /// Per destination shard, the sources that punctuate it.
    Listed(Vec<Vec<u32>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeInputs {
    pub edge: EdgeId,
    pub src_shards: u32,
    pub senders: Senders,
}

impl EdgeInputs {
    fn expects(&self, dst: u32, src: u32) -> bool {
        match &self.senders {
            Senders::All => src < self.src_shards,
            Senders::Listed(l) => l.get(dst as usize).is_some_and(|s| s.contains(&src)),
        }
    }

    fn expected_count(&self, dst: u32) -> u32 {
        match &self.senders {
            Senders::All => self.src_shards,
            Senders::Listed(l) => l.get(dst as usize).map_or(0, |s| s.len() as u32),
        }
    }

    fn dsts_of(&self, src: u32, dst_shards: u32) -> Vec<u32> {
        match &self.senders {
            Senders::All => (0..dst_shards).collect(),
            Senders::Listed(l) => (0..dst_shards)
                .filter(|&d| l.get(d as usize).is_some_and(|s| s.contains(&src)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInputs {
    pub node: NodeId,
    pub shards: u32,
    pub edges: Vec<EdgeInputs>,
}

#[derive(Clone, Debug, Default)]
struct ShardProgress {
    /// Per (edge index, src): tuples received so far.
    received: BTreeMap<(usize, u32), u32>,
    /// Per (edge index, src): punctuated count.
    punctuated: BTreeMap<(usize, u32), u32>,
    missing_punctuations: u32,
    /// Punctuated tuples not yet received.
    deficit: u64,
}

/// Count-based completion detection for the inputs of sharded nodes.
///
/// Progress state for a destination shard is created on the first message
/// and dropped once the shard is ready, so memory follows the shards that
/// still have input in flight.
#[derive(Clone, Debug, Default)]
pub struct ProgressTracker {
    nodes: BTreeMap<NodeId, NodeInputs>,
    edges: BTreeMap<EdgeId, (NodeId, usize)>,
    live: BTreeSet<InstanceId>,
    states: BTreeMap<(NodeId, InstanceId, u32), ShardProgress>,
    ready: BTreeMap<(NodeId, InstanceId), BTreeSet<u32>>,
}

impl ProgressTracker {
    pub fn new(inputs: Vec<NodeInputs>) -> Self {
        let mut t = ProgressTracker::default();
        for n in inputs {
            for (i, e) in n.edges.iter().enumerate() {
                t.edges.insert(e.edge, (n.node, i));
            }
            t.nodes.insert(n.node, n);
        }
        t
    }

    /// Inputs of every non-arg node of a lowered graph. Destination shards
    /// wait only for the sources their resharding pairs name.
    pub fn for_graph(g: &ProgramGraph) -> Result<Self, CoordError> {
        let mut inputs: BTreeMap<NodeId, NodeInputs> = BTreeMap::new();
        for e in &g.edges {
            let spec = e.reshard.as_ref().ok_or(CoordError::NotLowered)?;
            let n = g.shards(e.dst);
            let mut listed = vec![Vec::new(); n as usize];
            for p in &spec.pairs {
                listed[p.dst as usize].push(p.src);
            }
            inputs
                .entry(e.dst)
                .or_insert_with(|| NodeInputs {
                    node: e.dst,
                    shards: n,
                    edges: Vec::new(),
                })
                .edges
                .push(EdgeInputs {
                    edge: e.id,
                    src_shards: spec.src_shards,
                    senders: Senders::Listed(listed),
                });
        }
        Ok(Self::new(inputs.into_values().collect()))
    }

    pub fn start(&mut self, instance: InstanceId) -> Result<(), CoordError> {
        if !self.live.insert(instance) {
            return Err(CoordError::DuplicateInstance(instance));
        }
        Ok(())
    }

    /// Forget an instance and everything recorded for it.
    pub fn retire(&mut self, instance: InstanceId) {
        self.live.remove(&instance);
        self.states.retain(|k, _| k.1 != instance);
        self.ready.retain(|k, _| k.1 != instance);
    }

    /// Shards that currently hold progress state.
    pub fn active_states(&self) -> usize {
        self.states.len()
    }

    pub fn is_ready(&self, node: NodeId, instance: InstanceId, shard: u32) -> bool {
        self.ready.get(&(node, instance)).is_some_and(|s| s.contains(&shard))
    }

    fn lookup(&self, edge: EdgeId, instance: InstanceId) -> Result<(NodeId, usize), CoordError> {
        if !self.live.contains(&instance) {
            return Err(CoordError::UnknownInstance(instance));
        }
        self.edges.get(&edge).copied().ok_or(CoordError::UnknownEdge(edge))
    }

    fn state(&mut self, node: NodeId, instance: InstanceId, shard: u32) -> Result<&mut ShardProgress, CoordError> {
        if self.is_ready(node, instance, shard) {
            return Err(CoordError::ProtocolViolation(format!(
                "message for node {} shard {shard} after it became ready",
                node.0
            )));
        }
        let inputs = &self.nodes[&node];
        Ok(self
            .states
            .entry((node, instance, shard))
            .or_insert_with(|| ShardProgress {
                missing_punctuations: inputs.edges.iter().map(|e| e.expected_count(shard)).sum(),
                ..ShardProgress::default()
            }))
    }

    fn settle(&mut self, node: NodeId, instance: InstanceId, shard: u32) -> Option<ShardReady> {
        let s = &self.states[&(node, instance, shard)];
        if s.missing_punctuations > 0 || s.deficit > 0 {
            return None;
        }
        self.states.remove(&(node, instance, shard));
        self.ready.entry((node, instance)).or_default().insert(shard);
        Some(ShardReady { node, instance, shard })
    }

    pub fn on_tuple(&mut self, t: &DataTuple) -> Result<Option<ShardReady>, CoordError> {
        let (node, ei) = self.lookup(t.edge, t.instance)?;
        let inputs = &self.nodes[&node];
        if t.dst >= inputs.shards || !inputs.edges[ei].expects(t.dst, t.src) {
            return Err(CoordError::ProtocolViolation(format!(
                "edge {}: shard {} does not send to shard {}",
                t.edge.0, t.src, t.dst
            )));
        }
        let s = self.state(node, t.instance, t.dst)?;
        let got = s.received.entry((ei, t.src)).or_insert(0);
        if let Some(&limit) = s.punctuated.get(&(ei, t.src)) {
            if *got >= limit {
                return Err(CoordError::ProtocolViolation(format!(
                    "edge {}: tuple {} from shard {} to shard {} exceeds punctuated count {limit}",
                    t.edge.0,
                    *got + 1,
                    t.src,
                    t.dst
                )));
            }
            s.deficit -= 1;
        }
        *got += 1;
        Ok(self.settle(node, t.instance, t.dst))
    }

    pub fn on_punctuation(&mut self, p: &Punctuation) -> Result<Vec<ShardReady>, CoordError> {
        let (node, ei) = self.lookup(p.edge, p.instance)?;
        let inputs = &self.nodes[&node];
        let edge = &inputs.edges[ei];
        if p.src >= edge.src_shards {
            return Err(CoordError::ProtocolViolation(format!(
                "edge {}: no source shard {}",
                p.edge.0, p.src
            )));
        }
        let dsts = edge.dsts_of(p.src, inputs.shards);
        if let Some((d, _)) = p.counts.iter().find(|(d, c)| **c > 0 && !dsts.contains(d)) {
            return Err(CoordError::ProtocolViolation(format!(
                "edge {}: punctuation counts tuples for shard {d}, which shard {} does not feed",
                p.edge.0, p.src
            )));
        }
        let mut out = Vec::new();
        for d in dsts {
            let count = p.counts.get(&d).copied().unwrap_or(0);
            let s = self.state(node, p.instance, d)?;
            if s.punctuated.insert((ei, p.src), count).is_some() {
                return Err(CoordError::ProtocolViolation(format!(
                    "edge {}: second punctuation from shard {}",
                    p.edge.0, p.src
                )));
            }
            let got = s.received.get(&(ei, p.src)).copied().unwrap_or(0);
            if got > count {
                return Err(CoordError::ProtocolViolation(format!(
                    "edge {}: shard {} sent {got} tuples to shard {d} but punctuated {count}",
                    p.edge.0, p.src
                )));
            }
            s.missing_punctuations -= 1;
            s.deficit += (count - got) as u64;
            if let Some(r) = self.settle(node, p.instance, d) {
                out.push(r);
            }
        }
        Ok(out)
    }
}
