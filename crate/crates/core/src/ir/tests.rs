use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::hardware::{ClusterConfig, DeviceId, LinkKind, Topology};
use crate::ids::ClientId;
use crate::resman::{DeviceMap, ResourceManager, SliceRequest, VirtualSlice};

const MB: u64 = 1_000_000;

fn slice(id: u32, n: u32) -> VirtualSlice {
    VirtualSlice {
        id: SliceId(id),
        shape: vec![n],
        island: None,
        exclusive: false,
    }
}

fn f(name: &str, shards: u32, in_bytes: u64, out_bytes: u64) -> Arc<CompiledFunction> {
    Arc::new(CompiledFunction::new(name, shards, 1_000).with_io(&[in_bytes], &[out_bytes]))
}

/// f(v) = (b(x), a(c(x))) with x = a(v).
fn fig2() -> TracedProgram {
    let a = f("a", 2, MB, MB);
    let b = f("b", 2, MB, MB);
    let c = f("c", 2, MB, MB);
    let mut t = Tracer::new(ClientId(0));
    let s = t.declare_slice(slice(0, 2));
    let v = t.arg(2, MB);
    let x = t.call(&a, s, &[v]).unwrap()[0];
    let y = t.call(&b, s, &[x]).unwrap()[0];
    let w = t.call(&c, s, &[x]).unwrap()[0];
    let z = t.call(&a, s, &[w]).unwrap()[0];
    t.finish(&[y, z]).unwrap()
}

fn count(g: &ProgramGraph) -> (usize, usize, usize) {
    let args = g
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Arg { .. }))
        .count();
    let compute = g.compute_nodes().count();
    let results = g.nodes.iter().filter(|n| n.kind == NodeKind::Result).count();
    (args, compute, results)
}

fn chain(shards: &[u32], bytes: u64) -> TracedProgram {
    let mut t = Tracer::new(ClientId(0));
    let mut v = t.arg(shards[0], bytes / shards[0] as u64);
    for (i, &n) in shards.iter().enumerate() {
        let s = t.declare_slice(slice(i as u32, n));
        let per = bytes / n as u64;
        let func = f(&format!("f{i}"), n, per, per);
        v = t.call(&func, s, &[v]).unwrap()[0];
    }
    t.finish(&[v]).unwrap()
}

#[test]
fn fig2_program_has_four_compute_nodes() {
    let p = fig2();
    assert_eq!(count(&p.graph), (1, 4, 2));
    let names: Vec<&str> = p
        .graph
        .compute_nodes()
        .map(|n| n.func().unwrap().name.as_str())
        .collect();
    assert_eq!(names, ["a", "b", "c", "a"]);
    // x feeds both b and c.
    assert_eq!(p.graph.outputs_of(NodeId(1)).count(), 2);
}

#[test]
fn two_node_chain_is_four_nodes_regardless_of_shards() {
    let p = chain(&[1024, 1024], 1024 * MB);
    assert_eq!(p.graph.nodes.len(), 4);
    assert_eq!(p.graph.edges.len(), 3);
}

#[test]
fn empty_trace_is_valid() {
    let p = trace(ClientId(3), &[], &[], &[]).unwrap();
    assert!(p.graph.nodes.is_empty());
    assert_eq!(validate_regularity(&p.graph), Regularity::AllRegular);
    assert!(dispatch_segments(&p.graph).is_empty());
}

#[test]
fn call_list_trace_matches_tracer() {
    let a = f("a", 2, MB, MB);
    let b = f("b", 2, MB, MB);
    let c = f("c", 2, MB, MB);
    let s = SliceId(0);
    let calls = vec![
        Call {
            func: a.clone(),
            slice: s,
            inputs: vec![ValueRef::Arg(0)],
        },
        Call {
            func: b,
            slice: s,
            inputs: vec![ValueRef::Output { call: 0, port: 0 }],
        },
        Call {
            func: c,
            slice: s,
            inputs: vec![ValueRef::Output { call: 0, port: 0 }],
        },
        Call {
            func: a,
            slice: s,
            inputs: vec![ValueRef::Output { call: 2, port: 0 }],
        },
    ];
    let results = [
        ValueRef::Output { call: 1, port: 0 },
        ValueRef::Output { call: 3, port: 0 },
    ];
    let p = trace(ClientId(0), &[slice(0, 2)], &calls, &results).unwrap();
    assert_eq!(p, fig2());
}

#[test]
fn undefined_value_is_a_trace_error() {
    let a = f("a", 1, 8, 8);
    let calls = vec![Call {
        func: a,
        slice: SliceId(0),
        inputs: vec![ValueRef::Output { call: 0, port: 0 }],
    }];
    let err = trace(ClientId(0), &[slice(0, 1)], &calls, &[]).unwrap_err();
    assert!(matches!(err, IrError::Trace(_)), "{err}");
}

fn lowering_setup(n_src: u32, n_dst: u32, logical: u64) -> (TracedProgram, Topology, ResourceManager) {
    let topo = Topology::new(&ClusterConfig::uniform(2, 2, 4)).unwrap();
    let rm = ResourceManager::new(&topo);
    let mut t = Tracer::new(ClientId(0));
    let s0 = t.declare_slice(slice(0, n_src));
    let s1 = t.declare_slice(slice(1, n_dst));
    let a = f("a", n_src, logical / n_src as u64, logical / n_src as u64);
    let b = f("b", n_dst, logical / n_dst as u64, logical / n_dst as u64);
    let v = t.arg(n_src, logical / n_src as u64);
    let x = t.call(&a, s0, &[v]).unwrap()[0];
    let y = t.call(&b, s1, &[x]).unwrap()[0];
    (t.finish(&[y]).unwrap(), topo, rm)
}

#[test]
fn same_devices_lower_to_one_to_one() {
    let (p, topo, _) = lowering_setup(4, 4, 8 * MB);
    let mut map = DeviceMap::default();
    let devs: Vec<DeviceId> = (0..4).map(DeviceId).collect();
    map.insert(SliceId(0), devs.clone());
    map.insert(SliceId(1), devs);
    let g = lower(&p, &map, &topo).unwrap();
    let spec = g.edges[1].reshard.as_ref().unwrap();
    assert_eq!(spec.kind, ReshardKind::OneToOne);
    assert_eq!(spec.transfer_bytes(), 0);
}

#[test]
fn two_to_four_lowers_to_scatter() {
    let (p, topo, _) = lowering_setup(2, 4, 8 * MB);
    let mut map = DeviceMap::default();
    map.insert(SliceId(0), vec![DeviceId(0), DeviceId(1)]);
    map.insert(SliceId(1), (4..8).map(DeviceId).collect());
    let g = lower(&p, &map, &topo).unwrap();
    let spec = g.edges[1].reshard.as_ref().unwrap();
    assert_eq!(spec.kind, ReshardKind::Scatter);
    assert_eq!(spec.pairs.len(), 4);
    assert!(spec
        .pairs
        .iter()
        .all(|p| p.bytes == 2 * MB && p.link == Some(LinkKind::Ici)));
    assert_eq!(spec.bytes_from_src(0), 4 * MB);
}

#[test]
fn missing_slice_and_size_mismatch_fail() {
    let (p, topo, _) = lowering_setup(2, 2, 8 * MB);
    let mut map = DeviceMap::default();
    map.insert(SliceId(0), vec![DeviceId(0), DeviceId(1)]);
    assert_eq!(lower(&p, &map, &topo), Err(IrError::MissingSlice(SliceId(1))));

    let mut t = Tracer::new(ClientId(0));
    let s = t.declare_slice(slice(0, 2));
    let v = t.arg(2, 100);
    let x = t.call(&f("a", 2, 100, 100), s, &[v]).unwrap()[0];
    let y = t.call(&f("b", 2, 999, 999), s, &[x]).unwrap()[0];
    let p = t.finish(&[y]).unwrap();
    map.insert(SliceId(0), vec![DeviceId(0), DeviceId(1)]);
    assert!(matches!(lower(&p, &map, &topo), Err(IrError::Type { edge: 1, .. })));
}

#[test]
fn relowering_changes_only_bindings() {
    let (p, topo, mut rm) = lowering_setup(4, 4, 8 * MB);
    let mut ids = Vec::new();
    for _ in 0..2 {
        ids.push(rm.allocate_slice(SliceRequest::new(&[4])).unwrap().0.id);
    }
    let g1 = lower(&p, &rm.device_map(), &topo).unwrap();
    assert_eq!(g1, lower(&p, &rm.device_map(), &topo).unwrap());
    rm.allocate_slice(SliceRequest::new(&[8]).on_island(crate::hardware::IslandId(1)))
        .unwrap();
    rm.remap(ids[1]).unwrap();
    let g2 = lower(&p, &rm.device_map(), &topo).unwrap();
    assert_ne!(g1, g2);
    let strip = |g: &ProgramGraph| {
        let mut g = g.clone();
        for n in &mut g.nodes {
            n.devices.clear();
        }
        for e in &mut g.edges {
            for pair in &mut e.reshard.as_mut().unwrap().pairs {
                pair.link = None;
            }
        }
        g
    };
    assert_eq!(strip(&g1).nodes, strip(&g2).nodes);
    assert_eq!(
        strip(&g1).edges.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>(),
        strip(&g2).edges.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>()
    );
}

#[test]
fn irregular_node_splits_segments() {
    let mut t = Tracer::new(ClientId(0));
    let s = t.declare_slice(slice(0, 1));
    let mut v = t.arg(1, 8);
    for i in 0..5 {
        let func = Arc::new(
            CompiledFunction::new(&format!("n{i}"), 1, 10)
                .with_io(&[8], &[8])
                .regular(i != 2),
        );
        v = t.call(&func, s, &[v]).unwrap()[0];
    }
    let p = t.finish(&[v]).unwrap();
    assert_eq!(validate_regularity(&p.graph), Regularity::Irregular(vec![NodeId(3)]));
    let segs = dispatch_segments(&p.graph);
    let ids = |s: &Segment| s.nodes.iter().map(|n| n.0).collect::<Vec<_>>();
    assert_eq!(segs.len(), 3);
    assert_eq!((ids(&segs[0]), segs[0].parallel), (vec![1, 2], true));
    assert_eq!((ids(&segs[1]), segs[1].parallel), (vec![3], false));
    assert_eq!((ids(&segs[2]), segs[2].parallel), (vec![4, 5], true));
}

#[test]
fn fig2_round_trips_through_json() {
    let p = fig2();
    let s = serialize(&p);
    assert_eq!(deserialize(&s).unwrap(), p);
    assert_eq!(digest(&p), digest(&deserialize(&s).unwrap()));
}

#[test]
fn lowered_graph_round_trips() {
    let (p, topo, _) = lowering_setup(2, 4, 8 * MB);
    let mut map = DeviceMap::default();
    map.insert(SliceId(0), vec![DeviceId(0), DeviceId(1)]);
    map.insert(SliceId(1), (4..8).map(DeviceId).collect());
    let g = lower(&p, &map, &topo).unwrap();
    assert_eq!(deserialize_graph(&serialize_graph(&g)).unwrap(), g);
}

#[test]
fn empty_object_is_a_parse_error() {
    assert!(matches!(deserialize("{}"), Err(IrError::Parse(_))));
    assert!(matches!(deserialize("not json"), Err(IrError::Parse(_))));
}

#[test]
fn parse_errors_name_the_node() {
    let mut doc: serde_json::Value = serde_json::from_str(&serialize(&fig2())).unwrap();
    doc["nodes"][2]["fn"].as_object_mut().unwrap().remove("shards");
    let err = deserialize(&doc.to_string()).unwrap_err().to_string();
    assert!(err.contains("nodes[2]"), "{err}");
    assert!(err.contains("shards"), "{err}");
}

proptest! {
    #[test]
    fn chain_node_count_ignores_shard_counts(shards in prop::collection::vec(1u32..2048, 1..12)) {
        let p = chain(&shards, 1 << 24);
        prop_assert_eq!(p.graph.nodes.len(), shards.len() + 2);
    }

    #[test]
    fn resharding_conserves_bytes(m in 1u32..64, n in 1u32..64, bytes in 0u64..1 << 30, same in any::<bool>()) {
        let s = ReshardingSpec::block(m, n, bytes, same);
        let out: u64 = (0..m).map(|i| s.bytes_from_src(i)).sum();
        let inn: u64 = (0..n).map(|j| s.bytes_into_dst(j)).sum();
        prop_assert_eq!(out, bytes);
        prop_assert_eq!(inn, bytes);
        // Every destination hears from at least one source.
        for j in 0..n {
            prop_assert!(s.senders_to(j).next().is_some());
        }
    }

    #[test]
    fn lowering_is_pure_and_acyclic(a in 1u32..5, b in 1u32..5) {
        let (p, topo, mut rm) = lowering_setup(a, b, 1 << 20);
        rm.allocate_slice(SliceRequest::new(&[a])).unwrap();
        rm.allocate_slice(SliceRequest::new(&[b])).unwrap();
        let map = rm.device_map();
        let g1 = lower(&p, &map, &topo);
        let g2 = lower(&p, &map, &topo);
        prop_assert_eq!(&g1, &g2);
        if let Ok(g) = g1 {
            prop_assert!(g.is_acyclic());
        }
    }
}
