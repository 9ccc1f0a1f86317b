use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use super::ExecError;
use crate::hardware::{DeviceId, HostId, IslandId, Topology};
use crate::ir::{
    dispatch_segments, CompiledFunction, EdgeId, GraphForm, NodeId, NodeKind, ProgramGraph, Segment, TensorSpec,
};

/// Static facts about one compute node, derived once per program.
#[derive(Clone, Debug)]
pub(crate) struct NodeInfo {
    pub island: IslandId,
    pub devices: Vec<DeviceId>,
    /// Distinct hosts, ascending.
    pub hosts: Vec<HostId>,
    pub duration_ns: u64,
    pub collective: bool,
    pub regular: bool,
    pub out_bytes: u64,
    /// Per shard: bytes arriving over a link.
    pub staging: Vec<u64>,
    /// Edges from compute producers.
    pub in_edges: Vec<EdgeId>,
    /// Edges from client arguments.
    pub arg_edges: Vec<EdgeId>,
    /// Edges into compute consumers.
    pub out_edges: Vec<EdgeId>,
    pub result_refs: u32,
    /// Per local host: hosts whose shards send it data.
    pub producer_hosts: BTreeMap<HostId, BTreeSet<HostId>>,
    pub names: Vec<String>,
}

impl NodeInfo {
    /// Per-device bytes the scheduler reserves while the node's buffers live.
    pub fn hbm_need(&self) -> Vec<(DeviceId, u64)> {
        let mut need: BTreeMap<DeviceId, u64> = BTreeMap::new();
        for (s, d) in self.devices.iter().enumerate() {
            *need.entry(*d).or_default() += self.out_bytes + self.staging[s];
        }
        need.into_iter().collect()
    }

    pub fn local_shards(&self, topo: &Topology, host: HostId) -> Vec<u32> {
        (0..self.devices.len() as u32)
            .filter(|&s| topo.host_of(self.devices[s as usize]) == host)
            .collect()
    }
}

/// A lowered program ready to run, with per-node placement facts.
#[derive(Clone, Debug)]
pub struct Program {
    pub name: String,
    pub graph: Arc<ProgramGraph>,
    pub(crate) segments: Vec<Segment>,
    pub(crate) info: BTreeMap<NodeId, NodeInfo>,
    pub(crate) args: Vec<NodeId>,
}

impl Program {
    pub fn new(name: &str, graph: ProgramGraph, topo: &Topology) -> Result<Self, ExecError> {
        if graph.form != GraphForm::Lowered {
            return Err(ExecError::Invalid("program graph is not lowered".into()));
        }
        graph.validate().map_err(|e| ExecError::Invalid(e.to_string()))?;
        let mut info = BTreeMap::new();
        for n in graph.compute_nodes() {
            let f = n.func().unwrap();
            let island = topo.island_of(n.devices[0]);
            if n.devices.iter().any(|d| topo.island_of(*d) != island) {
                return Err(ExecError::Invalid(format!(
                    "node {} spans more than one island",
                    n.id.0
                )));
            }
            let hosts: BTreeSet<HostId> = n.devices.iter().map(|d| topo.host_of(*d)).collect();
            let mut staging = vec![0u64; n.devices.len()];
            let mut in_edges = Vec::new();
            let mut arg_edges = Vec::new();
            let mut producer_hosts: BTreeMap<HostId, BTreeSet<HostId>> = BTreeMap::new();
            for e in graph.inputs_of(n.id) {
                let spec = e.reshard.as_ref().unwrap();
                let src = graph.node(e.src);
                if !src.is_compute() {
                    arg_edges.push(e.id);
                    continue;
                }
                in_edges.push(e.id);
                for p in &spec.pairs {
                    if p.link.is_some() {
                        staging[p.dst as usize] += p.bytes;
                    }
                    producer_hosts
                        .entry(topo.host_of(n.devices[p.dst as usize]))
                        .or_default()
                        .insert(topo.host_of(src.devices[p.src as usize]));
                }
            }
            let mut out_edges = Vec::new();
            let mut result_refs = 0;
            for e in graph.outputs_of(n.id) {
                if graph.node(e.dst).is_compute() {
                    out_edges.push(e.id);
                } else {
                    result_refs += 1;
                }
            }
            info.insert(
                n.id,
                NodeInfo {
                    island,
                    devices: n.devices.clone(),
                    hosts: hosts.into_iter().collect(),
                    duration_ns: f.duration_ns,
                    collective: f.collective && f.shards > 1,
                    regular: f.regular,
                    out_bytes: f.outputs.iter().map(|t| t.bytes).sum(),
                    staging,
                    in_edges,
                    arg_edges,
                    out_edges,
                    result_refs,
                    producer_hosts,
                    names: f.applied_names().into_iter().map(str::to_string).collect(),
                },
            );
        }
        let args = graph
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Arg { .. }))
            .map(|n| n.id)
            .collect();
        Ok(Program {
            name: name.to_string(),
            segments: dispatch_segments(&graph),
            graph: Arc::new(graph),
            info,
            args,
        })
    }

    pub fn compute_nodes(&self) -> usize {
        self.info.len()
    }

    /// Kernels one run executes.
    pub fn kernels(&self) -> u64 {
        self.info.values().map(|i| i.devices.len() as u64).sum()
    }

    /// Device memory one run allocates in total: arguments, outputs and
    /// staging for every node.
    pub fn footprint(&self) -> BTreeMap<DeviceId, u64> {
        let mut need: BTreeMap<DeviceId, u64> = BTreeMap::new();
        for &a in &self.args {
            let node = self.graph.node(a);
            if let NodeKind::Arg { bytes, .. } = node.kind {
                for &d in &node.devices {
                    *need.entry(d).or_default() += bytes;
                }
            }
        }
        for info in self.info.values() {
            for (d, b) in info.hbm_need() {
                *need.entry(d).or_default() += b;
            }
        }
        need
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn islands(&self) -> BTreeSet<IslandId> {
        self.info.values().map(|i| i.island).collect()
    }

    pub fn devices(&self) -> BTreeSet<DeviceId> {
        self.info.values().flat_map(|i| i.devices.iter().copied()).collect()
    }

    /// Result digests computed from the graph alone.
    pub fn expected_digests(&self) -> Vec<u64> {
        let mut d: BTreeMap<NodeId, u64> = BTreeMap::new();
        for n in &self.graph.nodes {
            let v = match &n.kind {
                NodeKind::Arg { .. } => arg_digest(self.arg_index(n.id)),
                NodeKind::Compute { .. } => {
                    let ins = self.input_digests(n.id, &d);
                    node_digest(&ins, &self.info[&n.id].names)
                }
                NodeKind::Result => continue,
            };
            d.insert(n.id, v);
        }
        self.graph
            .results
            .iter()
            .map(|r| {
                let e = self.graph.inputs_of(*r).next().unwrap();
                d[&e.src]
            })
            .collect()
    }

    pub(crate) fn arg_index(&self, node: NodeId) -> usize {
        self.args.iter().position(|a| *a == node).unwrap()
    }

    /// Digests of a node's inputs in port order.
    pub(crate) fn input_digests(&self, node: NodeId, known: &BTreeMap<NodeId, u64>) -> Vec<u64> {
        let mut ins: Vec<(u32, u64)> = self
            .graph
            .inputs_of(node)
            .map(|e| (e.dst_port, known[&e.src]))
            .collect();
        ins.sort();
        ins.into_iter().map(|(_, v)| v).collect()
    }
}

pub(crate) fn arg_digest(index: usize) -> u64 {
    let mut h = DefaultHasher::new();
    ("arg", index).hash(&mut h);
    h.finish()
}

/// Content digest of a node's output: the applied function names folded
/// over the inputs. A single input passes through unchanged first, so a
/// chain and its fusion agree.
pub(crate) fn node_digest(inputs: &[u64], names: &[String]) -> u64 {
    let mut d = match inputs {
        [one] => *one,
        many => {
            let mut h = DefaultHasher::new();
            many.hash(&mut h);
            h.finish()
        }
    };
    for n in names {
        let mut h = DefaultHasher::new();
        (d, n).hash(&mut h);
        d = h.finish();
    }
    d
}

/// One function running `parts` back to back on the same devices.
pub fn fuse(name: &str, parts: &[&CompiledFunction]) -> Result<CompiledFunction, ExecError> {
    let (first, last) = match parts {
        [] => return Err(ExecError::Invalid("nothing to fuse".into())),
        [f, .., l] => (*f, *l),
        [f] => (*f, *f),
    };
    if parts.iter().any(|p| p.shards != first.shards) {
        return Err(ExecError::Invalid("fused parts must share a shard count".into()));
    }
    Ok(CompiledFunction {
        name: name.to_string(),
        shards: first.shards,
        inputs: first.inputs.clone(),
        outputs: last
            .outputs
            .iter()
            .map(|t| TensorSpec::with_layout(t.bytes, &t.layout))
            .collect(),
        duration_ns: parts.iter().map(|p| p.duration_ns).sum(),
        regular: parts.iter().all(|p| p.regular),
        collective: parts.iter().any(|p| p.collective),
        parts: parts
            .iter()
            .flat_map(|p| p.applied_names())
            .map(str::to_string)
            .collect(),
    })
}
