use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::hardware::{ClusterConfig, DeviceId, Topology};
use crate::ids::ClientId;
use crate::ir::CompiledFunction;

const US: u64 = 1_000;
const MS: u64 = 1_000_000;

fn topo_with(hosts: u32, per_host: u32, f: impl FnOnce(&mut ClusterConfig)) -> Arc<Topology> {
    let mut cfg = ClusterConfig::uniform(1, hosts, per_host);
    f(&mut cfg);
    Arc::new(Topology::new(&cfg).unwrap())
}

fn zero_links(cfg: &mut ClusterConfig) {
    cfg.dcn.latency_ns = 0;
    cfg.pcie.latency_ns = 0;
    cfg.islands[0].ici.latency_ns = 0;
}

/// One device per node, each on its own host.
fn spread_chain(topo: &Topology, nodes: usize, t: u64, bytes: u64) -> Arc<Program> {
    let placements: Vec<Vec<DeviceId>> = (0..nodes).map(|i| vec![DeviceId(i as u32)]).collect();
    Arc::new(chain(topo, "f", &placements, nodes, t, bytes).unwrap())
}

fn cfg(cost: CostModel, dispatch: DispatchMode) -> RuntimeConfig {
    RuntimeConfig {
        cost,
        dispatch,
        ..RuntimeConfig::default()
    }
}

fn one_run(topo: &Arc<Topology>, c: &RuntimeConfig, p: &Arc<Program>, submit: SubmitMode) -> Execution {
    let plan = ClientPlan::new(ClientId(0), p.clone(), 1).submit(submit);
    run(topo, c, vec![plan]).unwrap()
}

fn span(e: &Execution) -> u64 {
    let (s, t) = e.clients[0].run_spans[0];
    t - s
}

/// Closed-form timing of a chained submission of a chain whose nodes sit
/// on distinct hosts.
fn chain_oracle(topo: &Topology, cost: &CostModel, mode: DispatchMode, nodes: usize, t: u64, bytes: u64) -> u64 {
    let l = topo.dcn.latency_ns;
    let pcie = topo.pcie.latency_ns;
    let ctrl = l;
    let h = cost.host_prep_ns;
    let (d, f, rpc) = (cost.decision_ns, cost.fanout_ns_per_host, cost.client_rpc_ns);
    let x = topo.transfer_ns(DeviceId(0), DeviceId(1), bytes);
    let mut prev_p = 0;
    let mut prev_e = 0;
    for j in 0..nodes as u64 {
        let g = rpc + j * (d + f) + d + f + l;
        let p = match mode {
            DispatchMode::Sequential if j > 0 => g.max(prev_p + pcie + ctrl) + h,
            _ => g + h,
        };
        let k = if j == 0 {
            p + pcie
        } else {
            let a = p + ctrl;
            let xj = prev_e.max(a) + x;
            (p + pcie).max(xj)
        };
        prev_e = k + t;
        prev_p = p;
    }
    prev_e + rpc
}

#[test]
fn three_node_chain_example() {
    let topo = topo_with(3, 1, zero_links);
    // 10 MB over 100 GB/s is 0.1 ms.
    let p = spread_chain(&topo, 3, MS, 10_000_000);
    let e = one_run(
        &topo,
        &cfg(CostModel::free(), DispatchMode::Parallel),
        &p,
        SubmitMode::Chained,
    );
    assert_eq!(span(&e), 3_200 * US);
    assert!(e.hygiene.clean(), "{:?}", e.hygiene);
}

#[test]
fn sequential_and_parallel_dispatch_example() {
    let topo = topo_with(3, 1, zero_links);
    let p = spread_chain(&topo, 3, 100 * US, 10_000_000);
    let cost = CostModel {
        host_prep_ns: 500 * US,
        ..CostModel::free()
    };
    let seq = one_run(
        &topo,
        &cfg(cost.clone(), DispatchMode::Sequential),
        &p,
        SubmitMode::Chained,
    );
    let par = one_run(
        &topo,
        &cfg(cost.clone(), DispatchMode::Parallel),
        &p,
        SubmitMode::Chained,
    );
    assert_eq!(span(&seq), 1_700 * US);
    assert_eq!(span(&par), 1_000 * US);
    for mode in [DispatchMode::Sequential, DispatchMode::Parallel] {
        assert_eq!(
            chain_oracle(&topo, &cost, mode, 3, 100 * US, 10_000_000),
            if mode == DispatchMode::Sequential {
                1_700 * US
            } else {
                1_000 * US
            }
        );
    }
}

#[test]
fn single_node_costs_prep_plus_kernel() {
    let topo = topo_with(1, 1, zero_links);
    let p = spread_chain(&topo, 1, 300 * US, 1_000);
    let cost = CostModel {
        host_prep_ns: 70 * US,
        ..CostModel::free()
    };
    for mode in [DispatchMode::Sequential, DispatchMode::Parallel] {
        let e = one_run(&topo, &cfg(cost.clone(), mode), &p, SubmitMode::Chained);
        assert_eq!(span(&e), 370 * US);
    }
}

#[test]
fn no_host_work_means_nothing_to_overlap() {
    let topo = topo_with(3, 1, zero_links);
    let p = spread_chain(&topo, 3, 100 * US, 10_000_000);
    let seq = one_run(
        &topo,
        &cfg(CostModel::free(), DispatchMode::Sequential),
        &p,
        SubmitMode::Chained,
    );
    let par = one_run(
        &topo,
        &cfg(CostModel::free(), DispatchMode::Parallel),
        &p,
        SubmitMode::Chained,
    );
    assert_eq!(span(&seq), span(&par));
}

#[test]
fn long_kernels_mask_dispatch() {
    let topo = topo_with(3, 1, |_| {});
    let p = spread_chain(&topo, 3, 35 * MS, 1 << 20);
    let c = |m| cfg(CostModel::default(), m);
    let seq = span(&one_run(&topo, &c(DispatchMode::Sequential), &p, SubmitMode::Chained)) as f64;
    let par = span(&one_run(&topo, &c(DispatchMode::Parallel), &p, SubmitMode::Chained)) as f64;
    assert!((seq - par) / seq < 0.01);
}

#[test]
fn default_costs_match_oracle() {
    let topo = topo_with(4, 1, |_| {});
    let cost = CostModel::default();
    let p = spread_chain(&topo, 4, 200 * US, 1 << 20);
    for mode in [DispatchMode::Sequential, DispatchMode::Parallel] {
        let e = one_run(&topo, &cfg(cost.clone(), mode), &p, SubmitMode::Chained);
        assert_eq!(
            span(&e),
            chain_oracle(&topo, &cost, mode, 4, 200 * US, 1 << 20),
            "{mode:?}"
        );
        assert!(e.hygiene.clean());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parallel_dispatch_dominates(
        nodes in 1usize..6,
        t in 1u64..2_000,
        h in 0u64..500,
        kb in 0u64..4_096,
        rpc in 0u64..100,
        d in 0u64..30,
        f in 0u64..30,
    ) {
        let topo = topo_with(5, 1, |_| {});
        let bytes = kb * 1024;
        let p = spread_chain(&topo, nodes, t * US, bytes);
        let cost = CostModel {
            client_rpc_ns: rpc * US,
            decision_ns: d * US,
            fanout_ns_per_host: f * US,
            host_prep_ns: h * US,
            ..CostModel::default()
        };
        let seq = span(&one_run(&topo, &cfg(cost.clone(), DispatchMode::Sequential), &p, SubmitMode::Chained));
        let par = span(&one_run(&topo, &cfg(cost.clone(), DispatchMode::Parallel), &p, SubmitMode::Chained));
        prop_assert_eq!(seq, chain_oracle(&topo, &cost, DispatchMode::Sequential, nodes, t * US, bytes));
        prop_assert_eq!(par, chain_oracle(&topo, &cost, DispatchMode::Parallel, nodes, t * US, bytes));
        prop_assert!(par <= seq);
        let x = topo.transfer_ns(DeviceId(0), DeviceId(1), bytes);
        if nodes >= 2 && h * US > t * US + x {
            prop_assert!(par < seq);
        }
    }
}

#[test]
fn opbyop_equals_chained_without_control_costs() {
    let topo = topo_with(4, 1, |_| {});
    let p = spread_chain(&topo, 4, 100 * US, 4096);
    let c = cfg(
        CostModel {
            host_prep_ns: 20 * US,
            ..CostModel::free()
        },
        DispatchMode::Parallel,
    );
    let a = one_run(&topo, &c, &p, SubmitMode::OpByOp);
    let b = one_run(&topo, &c, &p, SubmitMode::Chained);
    assert_eq!(span(&a), span(&b));
}

#[test]
fn fused_then_chained_then_opbyop() {
    let topo = topo_with(1, 1, |_| {});
    let dev = vec![vec![DeviceId(0)]];
    let n = 16;
    let p = Arc::new(chain(&topo, "g", &dev, n, 50 * US, 4096).unwrap());
    let parts: Vec<&CompiledFunction> = p.graph.compute_nodes().map(|n| n.func().unwrap()).collect();
    let fused_fn = fuse("fused", &parts).unwrap();
    let mut b = ProgramBuilder::new(&topo, ClientId(0));
    let s = b.slice(&dev[0]);
    let a = b.arg(1, 4096);
    let v = b.call(fused_fn, s, &[a]).unwrap()[0];
    let fused = Arc::new(b.finish("fused", &[v]).unwrap());

    let c = RuntimeConfig::default();
    let f = one_run(&topo, &c, &fused, SubmitMode::Chained);
    let ch = one_run(&topo, &c, &p, SubmitMode::Chained);
    let op = one_run(&topo, &c, &p, SubmitMode::OpByOp);
    assert!(span(&f) <= span(&ch), "{} {}", span(&f), span(&ch));
    assert!(span(&ch) < span(&op), "{} {}", span(&ch), span(&op));
    // Same value whichever way it was dispatched.
    let want = p.expected_digests();
    assert_eq!(fused.expected_digests(), want);
    for e in [&f, &ch, &op] {
        assert_eq!(e.clients[0].last_digests, want);
        assert!(e.hygiene.clean(), "{:?}", e.hygiene);
    }
}

fn diamond(topo: &Topology, irregular_mid: bool) -> Arc<Program> {
    let mut b = ProgramBuilder::new(topo, ClientId(0));
    let s0 = b.slice(&[DeviceId(0), DeviceId(1)]);
    let s1 = b.slice(&[DeviceId(2), DeviceId(3)]);
    let a = b.arg(2, 2048);
    let f = |name: &str, ins: usize| {
        CompiledFunction::new(name, 2, 100 * US)
            .with_io(&vec![2048; ins], &[2048])
            .collective(true)
    };
    let x = b.call(f("x", 1), s0, &[a]).unwrap()[0];
    let y = b.call(f("y", 1).regular(!irregular_mid), s1, &[x]).unwrap()[0];
    let z = b.call(f("z", 1), s0, &[x]).unwrap()[0];
    let w = b.call(f("w", 2), s1, &[y, z]).unwrap()[0];
    b.finish("diamond", &[w, z]).unwrap().into()
}

#[test]
fn digests_agree_across_modes() {
    let topo = topo_with(2, 2, |_| {});
    for irregular in [false, true] {
        let p = diamond(&topo, irregular);
        let want = p.expected_digests();
        assert_eq!(want.len(), 2);
        for dispatch in [DispatchMode::Sequential, DispatchMode::Parallel] {
            for submit in [SubmitMode::OpByOp, SubmitMode::Chained] {
                let e = one_run(&topo, &cfg(CostModel::default(), dispatch), &p, submit);
                assert_eq!(e.clients[0].last_digests, want);
                assert!(e.hygiene.clean(), "{:?}", e.hygiene);
            }
        }
    }
}

#[test]
fn irregular_node_splits_segments() {
    let topo = topo_with(2, 2, |_| {});
    let p = diamond(&topo, true);
    let segs = p.segments();
    assert!(segs.len() >= 3);
    assert!(segs.iter().any(|s| !s.parallel));
    let regular = diamond(&topo, false);
    assert_eq!(regular.segments().len(), 1);
    let c = cfg(CostModel::default(), DispatchMode::Parallel);
    let slow = one_run(&topo, &c, &p, SubmitMode::Chained);
    let fast = one_run(&topo, &c, &regular, SubmitMode::Chained);
    assert!(span(&slow) > span(&fast));
}

#[test]
fn repeated_runs_keep_latest_results_only() {
    let topo = topo_with(2, 1, |_| {});
    let p = spread_chain(&topo, 2, 100 * US, 4096);
    for pacing in [Pacing::OpenLoop, Pacing::AwaitAck, Pacing::AwaitResults] {
        let plan = ClientPlan::new(ClientId(0), p.clone(), 5).pacing(pacing);
        let e = run(&topo, &RuntimeConfig::default(), vec![plan]).unwrap();
        assert_eq!(e.clients[0].runs_completed, 5);
        assert!(e.hygiene.clean(), "{pacing:?} {:?}", e.hygiene);
        assert_eq!(e.samples.len(), 10);
    }
}

#[test]
fn failed_client_frees_everything() {
    let topo = topo_with(2, 2, |_| {});
    let p = diamond(&topo, false);
    for fail_at in [0, 30 * US, 200 * US, 450 * US, 900 * US, 5 * MS] {
        for pacing in [Pacing::OpenLoop, Pacing::AwaitResults] {
            let victim = ClientPlan::new(ClientId(0), p.clone(), 200)
                .pacing(pacing)
                .fail_at(fail_at);
            let other = ClientPlan::new(ClientId(1), p.clone(), 3);
            let e = run(&topo, &RuntimeConfig::default(), vec![victim, other]).unwrap();
            assert!(e.clients[0].failed);
            assert!(e.clients[0].runs_completed < 200);
            assert_eq!(e.clients[1].runs_completed, 3);
            assert!(e.hygiene.clean(), "fail at {fail_at} {pacing:?}: {:?}", e.hygiene);
        }
    }
}

#[test]
fn oversized_argument_is_a_capacity_error() {
    let topo = topo_with(1, 1, |c| c.hbm_bytes = 1 << 20);
    let p = spread_chain(&topo, 1, 10 * US, 2 << 20);
    let plan = ClientPlan::new(ClientId(0), p, 1);
    assert!(matches!(
        run(&topo, &RuntimeConfig::default(), vec![plan]),
        Err(ExecError::Capacity(_))
    ));
}

#[test]
fn memory_pressure_serializes_instead_of_failing() {
    // A run needs 600 kB and each client keeps 200 kB of results, so runs
    // from different clients cannot all be resident at once.
    let topo = topo_with(1, 1, |c| c.hbm_bytes = 1_500_000);
    let dev = vec![vec![DeviceId(0)]];
    let p = Arc::new(chain(&topo, "m", &dev, 2, 50 * US, 200_000).unwrap());
    let plans = (0..3)
        .map(|c| ClientPlan::new(ClientId(c), p.clone(), 4).pacing(Pacing::OpenLoop))
        .collect();
    let e = run(&topo, &RuntimeConfig::default(), plans).unwrap();
    assert!(e.clients.iter().all(|c| c.runs_completed == 4));
    assert!(e.hygiene.clean(), "{:?}", e.hygiene);
}

#[test]
fn runs_are_deterministic() {
    let topo = topo_with(2, 2, |_| {});
    let p = diamond(&topo, true);
    let go = || {
        let c = RuntimeConfig {
            event_log: true,
            ..RuntimeConfig::default()
        };
        let plans = (0..3)
            .map(|i| ClientPlan::new(ClientId(i), p.clone(), 4).pacing(Pacing::OpenLoop))
            .collect();
        run(&topo, &c, plans).unwrap()
    };
    let a = go();
    let b = go();
    assert_eq!(a.event_log, b.event_log);
    assert!(a.event_log.as_ref().unwrap().len() > 100);
    assert_eq!(a.end_ns(), b.end_ns());
}

#[test]
fn gangs_enqueue_in_ticket_order_on_every_device() {
    let topo = topo_with(2, 2, |_| {});
    let p = diamond(&topo, false);
    let plans = (0..4)
        .map(|i| ClientPlan::new(ClientId(i), p.clone(), 3).pacing(Pacing::OpenLoop))
        .collect();
    let c = RuntimeConfig {
        record_timeline: true,
        ..RuntimeConfig::default()
    };
    let e = run(&topo, &c, plans).unwrap();
    // Collective members start together.
    let mut by_gang: std::collections::BTreeMap<(u64, u32), Vec<u64>> = Default::default();
    for k in &e.kernel_records {
        by_gang
            .entry((k.label.instance, k.label.node))
            .or_default()
            .push(k.start.0);
    }
    for starts in by_gang.values() {
        assert!(starts.iter().all(|s| *s == starts[0]));
    }
}

#[test]
fn many_held_results_are_freed_at_shutdown() {
    // More frees at shutdown than one report batch holds.
    let topo = topo_with(1, 2, |_| {});
    let mut b = ProgramBuilder::new(&topo, ClientId(0));
    let s = b.slice(&[DeviceId(0), DeviceId(1)]);
    let mut results = Vec::new();
    for i in 0..12 {
        let a = b.arg(2, 1000);
        let f = CompiledFunction::new(&format!("f{i}"), 2, 10 * US).with_io(&[1000], &[1000]);
        results.push(b.call(f, s, &[a]).unwrap()[0]);
    }
    let p = Arc::new(b.finish("wide", &results).unwrap());
    let e = one_run(&topo, &RuntimeConfig::default(), &p, SubmitMode::Chained);
    assert_eq!(e.clients[0].last_digests.len(), 12);
    assert!(e.hygiene.clean(), "{:?}", e.hygiene);
}
