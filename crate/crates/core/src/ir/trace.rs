use std::collections::BTreeMap;
use std::sync::Arc;

use super::function::CompiledFunction;
use super::graph::{Edge, EdgeId, GraphForm, Node, NodeId, NodeKind, ProgramGraph, TracedProgram};
use super::IrError;
use crate::ids::ClientId;
use crate::resman::{SliceId, VirtualSlice};

/// A traced value: output `port` of `node`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Value {
    pub node: NodeId,
    pub port: u32,
}

/// Records calls of compiled functions and builds the compact graph.
#[derive(Clone, Debug)]
pub struct Tracer {
    client: ClientId,
    slices: Vec<VirtualSlice>,
    graph: ProgramGraph,
}

impl Tracer {
    pub fn new(client: ClientId) -> Self {
        Tracer {
            client,
            slices: Vec::new(),
            graph: ProgramGraph::empty(),
        }
    }

    pub fn declare_slice(&mut self, slice: VirtualSlice) -> SliceId {
        let id = slice.id;
        if !self.slices.iter().any(|s| s.id == id) {
            self.slices.push(slice);
        }
        id
    }

    fn push_node(&mut self, kind: NodeKind) -> NodeId {
        let id = NodeId(self.graph.nodes.len() as u32);
        self.graph.nodes.push(Node {
            id,
            kind,
            devices: Vec::new(),
        });
        id
    }

    fn push_edge(&mut self, src: Value, dst: NodeId, dst_port: u32) {
        let id = EdgeId(self.graph.edges.len() as u32);
        self.graph.edges.push(Edge {
            id,
            src: src.node,
            src_port: src.port,
            dst,
            dst_port,
            reshard: None,
        });
    }

    pub fn arg(&mut self, shards: u32, bytes_per_shard: u64) -> Value {
        self.arg_with_layout(shards, bytes_per_shard, super::DEFAULT_LAYOUT)
    }

    pub fn arg_with_layout(&mut self, shards: u32, bytes_per_shard: u64, layout: &str) -> Value {
        let node = self.push_node(NodeKind::Arg {
            shards,
            bytes: bytes_per_shard,
            layout: layout.to_string(),
        });
        Value { node, port: 0 }
    }

    fn check_value(&self, v: Value) -> Result<(), IrError> {
        if v.node.0 as usize >= self.graph.nodes.len() || self.graph.output_spec(v.node, v.port).is_none() {
            return Err(IrError::Trace(format!(
                "undefined value: output {} of node {}",
                v.port, v.node.0
            )));
        }
        Ok(())
    }

    pub fn call(
        &mut self,
        func: &Arc<CompiledFunction>,
        slice: SliceId,
        inputs: &[Value],
    ) -> Result<Vec<Value>, IrError> {
        func.validate()?;
        let Some(s) = self.slices.iter().find(|s| s.id == slice) else {
            return Err(IrError::Trace(format!("`{}` uses undeclared slice {slice}", func.name)));
        };
        if s.device_count() != func.shards {
            return Err(IrError::Trace(format!(
                "`{}` has {} shards but slice {slice} has {} devices",
                func.name,
                func.shards,
                s.device_count()
            )));
        }
        if inputs.len() != func.inputs.len() {
            return Err(IrError::Trace(format!(
                "`{}` takes {} inputs, got {}",
                func.name,
                func.inputs.len(),
                inputs.len()
            )));
        }
        for &v in inputs {
            self.check_value(v)?;
        }
        let node = self.push_node(NodeKind::Compute {
            func: func.clone(),
            slice,
        });
        for (port, &v) in inputs.iter().enumerate() {
            self.push_edge(v, node, port as u32);
        }
        Ok((0..func.outputs.len() as u32)
            .map(|port| Value { node, port })
            .collect())
    }

    pub fn finish(mut self, results: &[Value]) -> Result<TracedProgram, IrError> {
        for &v in results {
            self.check_value(v)?;
            let r = self.push_node(NodeKind::Result);
            self.push_edge(v, r, 0);
            self.graph.results.push(r);
        }
        self.graph.form = GraphForm::Traced;
        let p = TracedProgram {
            client: self.client,
            slices: self.slices,
            graph: self.graph,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Reference to a value in a call list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRef {
    Arg(u32),
    Output { call: usize, port: u32 },
}

#[derive(Clone, Debug)]
pub struct Call {
    pub func: Arc<CompiledFunction>,
    pub slice: SliceId,
    pub inputs: Vec<ValueRef>,
}

/// Trace an ordered call list. Args are created on first use, shaped after
/// the input they feed.
pub fn trace(
    client: ClientId,
    slices: &[VirtualSlice],
    calls: &[Call],
    results: &[ValueRef],
) -> Result<TracedProgram, IrError> {
    let mut t = Tracer::new(client);
    for s in slices {
        t.declare_slice(s.clone());
    }
    let mut args: BTreeMap<u32, Value> = BTreeMap::new();
    let mut outputs: Vec<Vec<Value>> = Vec::with_capacity(calls.len());
    for (ci, call) in calls.iter().enumerate() {
        let mut inputs = Vec::with_capacity(call.inputs.len());
        for (port, r) in call.inputs.iter().enumerate() {
            let v = match *r {
                ValueRef::Arg(i) => match args.get(&i) {
                    Some(v) => *v,
                    None => {
                        let spec = call.func.inputs.get(port).ok_or_else(|| {
                            IrError::Trace(format!("call {ci}: `{}` has no input {port}", call.func.name))
                        })?;
                        let v = t.arg_with_layout(call.func.shards, spec.bytes, &spec.layout);
                        args.insert(i, v);
                        v
                    }
                },
                ValueRef::Output { call: src, port: p } => *outputs
                    .get(src)
                    .and_then(|o| o.get(p as usize))
                    .ok_or_else(|| IrError::Trace(format!("call {ci}: undefined value (output {p} of call {src})")))?,
            };
            inputs.push(v);
        }
        outputs.push(t.call(&call.func, call.slice, &inputs)?);
    }
    let mut res = Vec::with_capacity(results.len());
    for r in results {
        let v = match *r {
            ValueRef::Arg(i) => *args
                .get(&i)
                .ok_or_else(|| IrError::Trace(format!("result refers to unused arg {i}")))?,
            ValueRef::Output { call, port } => *outputs
                .get(call)
                .and_then(|o| o.get(port as usize))
                .ok_or_else(|| IrError::Trace(format!("result refers to undefined output {port} of call {call}")))?,
        };
        res.push(v);
    }
    t.finish(&res)
}
