use super::graph::{GraphForm, NodeKind, ProgramGraph, TracedProgram};
use super::reshard::ReshardingSpec;
use super::IrError;
use crate::hardware::{DeviceId, Topology};
use crate::resman::DeviceMap;

/// Bind every node to physical devices and price every edge.
///
/// Pure: the same program, map and topology always give the same graph.
pub fn lower(p: &TracedProgram, map: &DeviceMap, topo: &Topology) -> Result<ProgramGraph, IrError> {
    p.validate()?;
    lower_graph(&p.graph, map, topo)
}

pub fn lower_graph(g: &ProgramGraph, map: &DeviceMap, topo: &Topology) -> Result<ProgramGraph, IrError> {
    let mut out = g.clone();
    out.form = GraphForm::Lowered;
    for e in &mut out.edges {
        e.reshard = None;
    }

    // Compute nodes first; args and results follow their neighbours.
    for node in &mut out.nodes {
        node.devices.clear();
        if let NodeKind::Compute { func, slice } = &node.kind {
            let devs = map.get(*slice).ok_or(IrError::MissingSlice(*slice))?;
            if devs.len() != func.shards as usize {
                return Err(IrError::Invalid(format!(
                    "node {} has {} shards but {slice} maps to {} devices",
                    node.id.0,
                    func.shards,
                    devs.len()
                )));
            }
            for d in devs {
                topo.device(*d).map_err(|e| IrError::Invalid(e.to_string()))?;
            }
            node.devices = devs.to_vec();
        }
    }
    for i in 0..out.nodes.len() {
        let NodeKind::Arg { shards, .. } = out.nodes[i].kind else {
            continue;
        };
        let consumer = out
            .edges
            .iter()
            .filter(|e| e.src.0 as usize == i)
            .map(|e| e.dst)
            .find(|d| out.nodes[d.0 as usize].is_compute());
        let pool: Vec<DeviceId> = match consumer {
            Some(c) => out.nodes[c.0 as usize].devices.clone(),
            None => topo.devices.iter().map(|d| d.id).collect(),
        };
        out.nodes[i].devices = (0..shards as usize).map(|s| pool[s % pool.len()]).collect();
    }
    for i in 0..out.nodes.len() {
        if out.nodes[i].kind != NodeKind::Result {
            continue;
        }
        let src = out
            .edges
            .iter()
            .find(|e| e.dst.0 as usize == i)
            .map(|e| e.src)
            .ok_or_else(|| IrError::Invalid(format!("result node {i} has no input")))?;
        out.nodes[i].devices = out.nodes[src.0 as usize].devices.clone();
    }

    let mut specs = Vec::with_capacity(out.edges.len());
    for e in &out.edges {
        let m = out.shards(e.src);
        let n = out.shards(e.dst);
        let (src_bytes, src_layout) = out
            .output_spec(e.src, e.src_port)
            .ok_or_else(|| IrError::Invalid(format!("edge {} has no source output", e.id.0)))?;
        let (dst_bytes, dst_layout) = out
            .input_spec(e.dst, e.dst_port)
            .ok_or_else(|| IrError::Invalid(format!("edge {} has no destination input", e.id.0)))?;
        let logical_src = src_bytes * m as u64;
        let logical_dst = dst_bytes * n as u64;
        if logical_src != logical_dst {
            return Err(IrError::Type {
                edge: e.id.0 as usize,
                reason: format!(
                    "{m} shards x {src_bytes} bytes cannot be redistributed into {n} shards x {dst_bytes} bytes"
                ),
            });
        }
        let mut spec = ReshardingSpec::block(m, n, logical_src, src_layout == dst_layout);
        let src_devs = &out.node(e.src).devices;
        let dst_devs = &out.node(e.dst).devices;
        for pair in &mut spec.pairs {
            pair.link = topo
                .link_between(src_devs[pair.src as usize], dst_devs[pair.dst as usize])
                .map(|l| l.kind);
        }
        specs.push(spec);
    }
    for (e, spec) in out.edges.iter_mut().zip(specs) {
        e.reshard = Some(spec);
    }
    out.validate()?;
    Ok(out)
}
