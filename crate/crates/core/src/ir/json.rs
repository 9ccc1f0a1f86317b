use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::function::{CompiledFunction, FunctionJson, DEFAULT_LAYOUT};
use super::graph::{Edge, EdgeId, GraphForm, Node, NodeId, NodeKind, ProgramGraph, TracedProgram};
use super::reshard::ReshardingSpec;
use super::IrError;
use crate::hardware::DeviceId;
use crate::ids::ClientId;
use crate::resman::{SliceId, VirtualSlice};

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeJson {
    id: u32,
    kind: String,
    #[serde(rename = "fn", default, skip_serializing_if = "Option::is_none")]
    func: Option<FunctionJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice: Option<SliceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shards: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layout: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    devices: Vec<DeviceId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeJson {
    src: u32,
    dst: u32,
    #[serde(default, skip_serializing_if = "is_zero")]
    src_port: u32,
    #[serde(default, skip_serializing_if = "is_zero")]
    dst_port: u32,
    #[serde(default)]
    reshard: Option<ReshardingSpec>,
}

fn node_to_json(n: &Node) -> NodeJson {
    let mut j = NodeJson {
        id: n.id.0,
        kind: String::new(),
        func: None,
        slice: None,
        shards: None,
        bytes: None,
        layout: None,
        devices: n.devices.clone(),
    };
    match &n.kind {
        NodeKind::Arg { shards, bytes, layout } => {
            j.kind = "arg".into();
            j.shards = Some(*shards);
            j.bytes = Some(*bytes);
            if layout != DEFAULT_LAYOUT {
                j.layout = Some(layout.clone());
            }
        }
        NodeKind::Compute { func, slice } => {
            j.kind = "compute".into();
            j.func = Some(FunctionJson::from(func.as_ref()));
            j.slice = Some(*slice);
        }
        NodeKind::Result => j.kind = "result".into(),
    }
    j
}

fn node_from_json(j: NodeJson) -> Result<Node, String> {
    let kind = match j.kind.as_str() {
        "arg" => NodeKind::Arg {
            shards: j.shards.ok_or("arg node needs `shards`")?,
            bytes: j.bytes.ok_or("arg node needs `bytes`")?,
            layout: j.layout.unwrap_or_else(|| DEFAULT_LAYOUT.to_string()),
        },
        "compute" => {
            let f = j.func.ok_or("compute node needs `fn`")?;
            let func = CompiledFunction::try_from(f).map_err(|e| format!("fn: {e}"))?;
            NodeKind::Compute {
                func: Arc::new(func),
                slice: j.slice.ok_or("compute node needs `slice`")?,
            }
        }
        "result" => NodeKind::Result,
        other => return Err(format!("unknown node kind `{other}`")),
    };
    Ok(Node {
        id: NodeId(j.id),
        kind,
        devices: j.devices,
    })
}

fn graph_to_json(g: &ProgramGraph) -> serde_json::Map<String, Json> {
    let mut m = serde_json::Map::new();
    m.insert("form".into(), serde_json::to_value(g.form).unwrap());
    m.insert(
        "nodes".into(),
        serde_json::to_value(g.nodes.iter().map(node_to_json).collect::<Vec<_>>()).unwrap(),
    );
    let edges: Vec<EdgeJson> = g
        .edges
        .iter()
        .map(|e| EdgeJson {
            src: e.src.0,
            dst: e.dst.0,
            src_port: e.src_port,
            dst_port: e.dst_port,
            reshard: e.reshard.clone(),
        })
        .collect();
    m.insert("edges".into(), serde_json::to_value(edges).unwrap());
    m.insert("results".into(), serde_json::to_value(&g.results).unwrap());
    m
}

pub fn serialize_graph(g: &ProgramGraph) -> String {
    serde_json::to_string_pretty(&Json::Object(graph_to_json(g))).expect("graph serializes")
}

pub fn serialize(p: &TracedProgram) -> String {
    let mut m = serde_json::Map::new();
    m.insert("client".into(), serde_json::to_value(p.client).unwrap());
    m.insert("slices".into(), serde_json::to_value(&p.slices).unwrap());
    m.extend(graph_to_json(&p.graph));
    serde_json::to_string_pretty(&Json::Object(m)).expect("program serializes")
}

fn field<T: DeserializeOwned>(v: Json, path: &str) -> Result<T, IrError> {
    serde_json::from_value(v).map_err(|e| IrError::Parse(format!("{path}: {e}")))
}

fn list(obj: &mut serde_json::Map<String, Json>, key: &str, required: bool) -> Result<Vec<Json>, IrError> {
    match obj.remove(key) {
        Some(Json::Array(a)) => Ok(a),
        Some(_) => Err(IrError::Parse(format!("{key}: expected an array"))),
        None if required => Err(IrError::Parse(format!("missing field `{key}`"))),
        None => Ok(Vec::new()),
    }
}

fn graph_from_json(obj: &mut serde_json::Map<String, Json>) -> Result<ProgramGraph, IrError> {
    let form = match obj.remove("form") {
        Some(v) => field(v, "form")?,
        None => GraphForm::Traced,
    };
    let mut nodes = Vec::new();
    for (i, v) in list(obj, "nodes", true)?.into_iter().enumerate() {
        let j: NodeJson = field(v, &format!("nodes[{i}]"))?;
        nodes.push(node_from_json(j).map_err(|e| IrError::Parse(format!("nodes[{i}]: {e}")))?);
    }
    let mut edges = Vec::new();
    for (i, v) in list(obj, "edges", true)?.into_iter().enumerate() {
        let j: EdgeJson = field(v, &format!("edges[{i}]"))?;
        edges.push(Edge {
            id: EdgeId(i as u32),
            src: NodeId(j.src),
            src_port: j.src_port,
            dst: NodeId(j.dst),
            dst_port: j.dst_port,
            reshard: j.reshard,
        });
    }
    let results: Vec<NodeId> = field(Json::Array(list(obj, "results", true)?), "results")?;
    let g = ProgramGraph {
        form,
        nodes,
        edges,
        results,
    };
    g.validate().map_err(|e| IrError::Parse(e.to_string()))?;
    Ok(g)
}

fn top_object(s: &str) -> Result<serde_json::Map<String, Json>, IrError> {
    match serde_json::from_str::<Json>(s) {
        Ok(Json::Object(m)) => Ok(m),
        Ok(_) => Err(IrError::Parse("expected a JSON object".into())),
        Err(e) => Err(IrError::Parse(e.to_string())),
    }
}

fn reject_unknown(obj: &serde_json::Map<String, Json>) -> Result<(), IrError> {
    match obj.keys().next() {
        Some(k) => Err(IrError::Parse(format!("unknown field `{k}`"))),
        None => Ok(()),
    }
}

pub fn deserialize_graph(s: &str) -> Result<ProgramGraph, IrError> {
    let mut obj = top_object(s)?;
    let g = graph_from_json(&mut obj)?;
    reject_unknown(&obj)?;
    Ok(g)
}

pub fn deserialize(s: &str) -> Result<TracedProgram, IrError> {
    let mut obj = top_object(s)?;
    let client = match obj.remove("client") {
        Some(v) => field(v, "client")?,
        None => ClientId(0),
    };
    let mut slices = Vec::new();
    for (i, v) in list(&mut obj, "slices", false)?.into_iter().enumerate() {
        let s: VirtualSlice = field(v, &format!("slices[{i}]"))?;
        slices.push(s);
    }
    let graph = graph_from_json(&mut obj)?;
    reject_unknown(&obj)?;
    let p = TracedProgram { client, slices, graph };
    p.validate().map_err(|e| IrError::Parse(e.to_string()))?;
    Ok(p)
}

/// Stable digest of the serialized form.
pub fn digest(p: &TracedProgram) -> u64 {
    let mut h = DefaultHasher::new();
    serialize(p).hash(&mut h);
    h.finish()
}
