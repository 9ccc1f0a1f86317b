use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::function::CompiledFunction;
use super::reshard::ReshardingSpec;
use super::IrError;
use crate::hardware::DeviceId;
use crate::ids::ClientId;
use crate::resman::{SliceId, VirtualSlice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    /// A value supplied by the client.
    Arg { shards: u32, bytes: u64, layout: String },
    Compute {
        func: Arc<CompiledFunction>,
        slice: SliceId,
    },
    /// A value returned to the client.
    Result,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Physical devices, one per shard. Empty until lowered.
    pub devices: Vec<DeviceId>,
}

impl Node {
    pub fn func(&self) -> Option<&CompiledFunction> {
        match &self.kind {
            NodeKind::Compute { func, .. } => Some(func),
            _ => None,
        }
    }

    pub fn is_compute(&self) -> bool {
        matches!(self.kind, NodeKind::Compute { .. })
    }

    pub fn is_regular(&self) -> bool {
        self.func().is_none_or(|f| f.regular)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub id: EdgeId,
    pub src: NodeId,
    pub src_port: u32,
    pub dst: NodeId,
    pub dst_port: u32,
    /// Set by lowering.
    pub reshard: Option<ReshardingSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphForm {
    Traced,
    Lowered,
}

/// One node per sharded computation, one edge per sharded value use.
///
/// Node ids are dense and every edge points from a lower id to a higher one,
/// so id order is a topological order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProgramGraph {
    pub form: GraphForm,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub results: Vec<NodeId>,
}

impl ProgramGraph {
    pub fn empty() -> Self {
        ProgramGraph {
            form: GraphForm::Traced,
            nodes: Vec::new(),
            edges: Vec::new(),
            results: Vec::new(),
        }
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id.0 as usize]
    }

    pub fn compute_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.is_compute())
    }

    pub fn inputs_of(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.dst == id)
    }

    pub fn outputs_of(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.src == id)
    }

    /// Shard count of a node. Results take their producer's count.
    pub fn shards(&self, id: NodeId) -> u32 {
        match &self.node(id).kind {
            NodeKind::Arg { shards, .. } => *shards,
            NodeKind::Compute { func, .. } => func.shards,
            NodeKind::Result => self.inputs_of(id).next().map_or(0, |e| self.shards(e.src)),
        }
    }

    /// Per-shard bytes and layout produced on `port` of `id`.
    pub fn output_spec(&self, id: NodeId, port: u32) -> Option<(u64, &str)> {
        match &self.node(id).kind {
            NodeKind::Arg { bytes, layout, .. } => (port == 0).then_some((*bytes, layout.as_str())),
            NodeKind::Compute { func, .. } => func.outputs.get(port as usize).map(|t| (t.bytes, t.layout.as_str())),
            NodeKind::Result => None,
        }
    }

    /// Per-shard bytes and layout consumed on `port` of `id`.
    pub fn input_spec(&self, id: NodeId, port: u32) -> Option<(u64, String)> {
        match &self.node(id).kind {
            NodeKind::Arg { .. } => None,
            NodeKind::Compute { func, .. } => func.inputs.get(port as usize).map(|t| (t.bytes, t.layout.clone())),
            NodeKind::Result => {
                let e = self.inputs_of(id).next()?;
                self.output_spec(e.src, e.src_port).map(|(b, l)| (b, l.to_string()))
            }
        }
    }

    /// Structural checks: dense ids, edge endpoints, acyclicity, ports.
    pub fn validate(&self) -> Result<(), IrError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.0 as usize != i {
                return Err(IrError::Invalid(format!("nodes[{i}] has id {}", n.id.0)));
            }
            if let Some(f) = n.func() {
                f.validate()?;
            }
            if self.form == GraphForm::Lowered && n.devices.len() != self.shards(n.id) as usize {
                return Err(IrError::Invalid(format!(
                    "nodes[{i}] is bound to {} devices but has {} shards",
                    n.devices.len(),
                    self.shards(n.id)
                )));
            }
        }
        let n = self.nodes.len() as u32;
        for (i, e) in self.edges.iter().enumerate() {
            if e.id.0 as usize != i {
                return Err(IrError::Invalid(format!("edges[{i}] has id {}", e.id.0)));
            }
            if e.src.0 >= n || e.dst.0 >= n {
                return Err(IrError::Invalid(format!("edges[{i}] references a missing node")));
            }
            if e.src >= e.dst {
                return Err(IrError::Invalid(format!(
                    "edges[{i}] goes from node {} to node {}: not in topological order",
                    e.src.0, e.dst.0
                )));
            }
            if self.output_spec(e.src, e.src_port).is_none() {
                return Err(IrError::Invalid(format!(
                    "edges[{i}]: node {} has no output {}",
                    e.src.0, e.src_port
                )));
            }
            if matches!(self.node(e.dst).kind, NodeKind::Arg { .. }) {
                return Err(IrError::Invalid(format!("edges[{i}] feeds an arg")));
            }
            if self.form == GraphForm::Lowered && e.reshard.is_none() {
                return Err(IrError::Invalid(format!("edges[{i}] has no resharding spec")));
            }
        }
        for r in &self.results {
            if r.0 >= n || self.node(*r).kind != NodeKind::Result {
                return Err(IrError::Invalid(format!("result {} is not a result node", r.0)));
            }
        }
        for node in &self.nodes {
            if node.kind == NodeKind::Result && self.inputs_of(node.id).count() != 1 {
                return Err(IrError::Invalid(format!(
                    "result node {} must have exactly one input",
                    node.id.0
                )));
            }
        }
        if !self.is_acyclic() {
            return Err(IrError::Invalid("graph has a cycle".into()));
        }
        Ok(())
    }

    /// Kahn's algorithm; independent of the id-order convention.
    pub fn is_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            indeg[e.dst.0 as usize] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for e in self.edges.iter().filter(|e| e.src.0 as usize == i) {
                let d = e.dst.0 as usize;
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.push(d);
                }
            }
        }
        seen == n
    }
}

/// The tracer's output: a location-agnostic graph plus the virtual slices
/// it refers to.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TracedProgram {
    pub client: ClientId,
    pub slices: Vec<VirtualSlice>,
    pub graph: ProgramGraph,
}

impl TracedProgram {
    pub fn validate(&self) -> Result<(), IrError> {
        self.graph.validate()?;
        let declared: BTreeSet<SliceId> = self.slices.iter().map(|s| s.id).collect();
        for n in &self.graph.nodes {
            if let NodeKind::Compute { func, slice } = &n.kind {
                let Some(s) = self.slices.iter().find(|s| s.id == *slice) else {
                    return Err(IrError::Invalid(format!(
                        "node {} uses undeclared slice {slice}",
                        n.id.0
                    )));
                };
                if s.device_count() != func.shards {
                    return Err(IrError::Invalid(format!(
                        "node {} has {} shards but slice {slice} has {} devices",
                        n.id.0,
                        func.shards,
                        s.device_count()
                    )));
                }
            }
        }
        if declared.len() != self.slices.len() {
            return Err(IrError::Invalid("duplicate slice id".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Regularity {
    AllRegular,
    Irregular(Vec<NodeId>),
}

pub fn validate_regularity(p: &ProgramGraph) -> Regularity {
    let irregular: Vec<NodeId> = p.nodes.iter().filter(|n| !n.is_regular()).map(|n| n.id).collect();
    if irregular.is_empty() {
        Regularity::AllRegular
    } else {
        Regularity::Irregular(irregular)
    }
}

/// A group of compute nodes dispatched together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub nodes: Vec<NodeId>,
    /// Parallel segments hold only regular nodes.
    pub parallel: bool,
}

/// Split the compute nodes into dispatch segments.
///
/// A node's depth is the largest number of irregular nodes on any path
/// reaching it (excluding itself). Segments are emitted as regular nodes of
/// depth 0, irregular nodes of depth 0, regular nodes of depth 1, and so on.
/// Every edge points into the same or a later segment.
pub fn dispatch_segments(p: &ProgramGraph) -> Vec<Segment> {
    let mut depth = vec![0u32; p.nodes.len()];
    // Id order is topological, so every source depth is final when read.
    for node in &p.nodes {
        let d = p
            .inputs_of(node.id)
            .map(|e| depth[e.src.0 as usize] + u32::from(!p.node(e.src).is_regular()))
            .max()
            .unwrap_or(0);
        depth[node.id.0 as usize] = d;
    }
    let max = p.compute_nodes().map(|n| depth[n.id.0 as usize]).max();
    let Some(max) = max else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for d in 0..=max {
        for parallel in [true, false] {
            let nodes: Vec<NodeId> = p
                .compute_nodes()
                .filter(|n| depth[n.id.0 as usize] == d && n.is_regular() == parallel)
                .map(|n| n.id)
                .collect();
            if !nodes.is_empty() {
                out.push(Segment { nodes, parallel });
            }
        }
    }
    out
}
