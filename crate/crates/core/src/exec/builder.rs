use std::sync::Arc;

use super::{ExecError, Program};
use crate::hardware::{DeviceId, Topology};
use crate::ids::ClientId;
use crate::ir::{lower, CompiledFunction, Tracer, Value};
use crate::resman::{DeviceMap, SliceId, VirtualSlice};

/// Traces a program against explicit device placements and lowers it.
pub struct ProgramBuilder<'a> {
    topo: &'a Topology,
    tracer: Tracer,
    map: DeviceMap,
    next_slice: u32,
}

impl<'a> ProgramBuilder<'a> {
    pub fn new(topo: &'a Topology, client: ClientId) -> Self {
        ProgramBuilder {
            topo,
            tracer: Tracer::new(client),
            map: DeviceMap::default(),
            next_slice: 0,
        }
    }

    /// A one-dimensional slice pinned to `devices`.
    pub fn slice(&mut self, devices: &[DeviceId]) -> SliceId {
        let id = SliceId(self.next_slice);
        self.next_slice += 1;
        self.tracer.declare_slice(VirtualSlice {
            id,
            shape: vec![devices.len() as u32],
            island: None,
            exclusive: false,
        });
        self.map.insert(id, devices.to_vec());
        id
    }

    pub fn arg(&mut self, shards: u32, bytes_per_shard: u64) -> Value {
        self.tracer.arg(shards, bytes_per_shard)
    }

    pub fn call(&mut self, f: CompiledFunction, slice: SliceId, inputs: &[Value]) -> Result<Vec<Value>, ExecError> {
        self.tracer
            .call(&Arc::new(f), slice, inputs)
            .map_err(|e| ExecError::Invalid(e.to_string()))
    }

    pub fn finish(self, name: &str, results: &[Value]) -> Result<Program, ExecError> {
        let traced = self
            .tracer
            .finish(results)
            .map_err(|e| ExecError::Invalid(e.to_string()))?;
        let g = lower(&traced, &self.map, self.topo).map_err(|e| ExecError::Invalid(e.to_string()))?;
        Program::new(name, g, self.topo)
    }
}

/// A linear chain of `nodes` functions. Node `i` runs on
/// `placements[i % placements.len()]`; every placement must have the same
/// width. Each shard passes `bytes` to the next node.
pub fn chain(
    topo: &Topology,
    name: &str,
    placements: &[Vec<DeviceId>],
    nodes: usize,
    duration_ns: u64,
    bytes: u64,
) -> Result<Program, ExecError> {
    let Some(first) = placements.first() else {
        return Err(ExecError::Invalid("chain needs a placement".into()));
    };
    let shards = first.len() as u32;
    let mut b = ProgramBuilder::new(topo, ClientId(0));
    let slices: Vec<SliceId> = placements.iter().map(|p| b.slice(p)).collect();
    let mut v = b.arg(shards, bytes);
    for i in 0..nodes {
        let f = CompiledFunction::new(&format!("{name}{i}"), shards, duration_ns)
            .with_io(&[bytes], &[bytes])
            .collective(shards > 1);
        v = b.call(f, slices[i % slices.len()], &[v])?[0];
    }
    b.finish(name, &[v])
}
