use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{CoordError, ProgressTracker};
use crate::hardware::{HostId, Topology};
use crate::ids::InstanceId;
use crate::ir::{EdgeId, GraphForm, NodeId, ProgramGraph};

/// Where the shards of one compute node run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodePlacement {
    pub node: NodeId,
    pub shard_hosts: Vec<HostId>,
}

impl NodePlacement {
    pub fn hosts(&self) -> BTreeSet<HostId> {
        self.shard_hosts.iter().copied().collect()
    }
}

/// One execution of a lowered program: a single dataflow whose edges each
/// carry one stream per resharding pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataflowInstance {
    pub instance: InstanceId,
    pub nodes: Vec<NodePlacement>,
    pub streams: BTreeMap<EdgeId, usize>,
    /// True when there is nothing to run.
    pub complete: bool,
}

/// Instantiates a lowered program and tracks the input progress of all its
/// live instances.
#[derive(Clone, Debug)]
pub struct Coordinator {
    graph: Arc<ProgramGraph>,
    placements: Vec<NodePlacement>,
    tracker: ProgressTracker,
    live: BTreeSet<InstanceId>,
}

impl Coordinator {
    pub fn new(graph: Arc<ProgramGraph>, topo: &Topology) -> Result<Self, CoordError> {
        if graph.form != GraphForm::Lowered {
            return Err(CoordError::NotLowered);
        }
        let tracker = ProgressTracker::for_graph(&graph)?;
        let placements = graph
            .compute_nodes()
            .map(|n| NodePlacement {
                node: n.id,
                shard_hosts: n.devices.iter().map(|&d| topo.host_of(d)).collect(),
            })
            .collect();
        Ok(Coordinator {
            graph,
            placements,
            tracker,
            live: BTreeSet::new(),
        })
    }

    pub fn graph(&self) -> &Arc<ProgramGraph> {
        &self.graph
    }

    pub fn instantiate(&mut self, instance: InstanceId) -> Result<DataflowInstance, CoordError> {
        self.tracker.start(instance)?;
        self.live.insert(instance);
        let streams = self
            .graph
            .edges
            .iter()
            .map(|e| (e.id, e.reshard.as_ref().map_or(0, |r| r.pairs.len())))
            .collect();
        Ok(DataflowInstance {
            instance,
            nodes: self.placements.clone(),
            streams,
            complete: self.placements.is_empty(),
        })
    }

    pub fn retire(&mut self, instance: InstanceId) {
        self.live.remove(&instance);
        self.tracker.retire(instance);
    }

    pub fn live(&self) -> usize {
        self.live.len()
    }

    pub fn tracker(&mut self) -> &mut ProgressTracker {
        &mut self.tracker
    }
}
