//! One line per acceptance criterion. Runs as a plain binary so the lines
//! show up in `cargo test` output; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use flowpath::bench::{self, BenchOutput};
use flowpath::coord::{DataTuple, EdgeInputs, NodeInputs, ProgressTracker, Punctuation, Senders};
use flowpath::exec::{chain, run, ClientPlan, CostModel, DispatchMode, Pacing, ProgramBuilder, RuntimeConfig};
use flowpath::hardware::{ClusterConfig, DeviceId, Topology};
use flowpath::ids::{ClientId, InstanceId};
use flowpath::ir::{CompiledFunction, EdgeId, NodeId, Tracer};
use flowpath::resman::{SliceId, VirtualSlice};
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn config(name: &str) -> ClusterConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    ClusterConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rows(out: &BenchOutput) -> &[Value] {
    &out.results.rows
}

fn f(v: &Value, k: &str) -> f64 {
    v[k].as_f64().unwrap_or(f64::NAN)
}

/// Benchmark outputs shared between criteria.
#[derive(Default)]
struct Runs {
    outputs: BTreeMap<&'static str, BenchOutput>,
}

impl Runs {
    fn get(&mut self, name: &'static str) -> Result<&BenchOutput, String> {
        if !self.outputs.contains_key(name) {
            let out = run_bench(name)?;
            self.outputs.insert(name, out);
        }
        Ok(&self.outputs[name])
    }
}

fn cluster_for(name: &str) -> ClusterConfig {
    match name {
        "crossover" | "parity" => config("cluster-crossover.json"),
        "pipeline" => config("cluster-pipeline.json"),
        "multitenancy" | "share" => config("cluster-multitenancy.json"),
        _ => config("cluster-default.json"),
    }
}

fn run_bench(name: &str) -> Result<BenchOutput, String> {
    bench::run(name, &cluster_for(name), None, 7).map_err(|e| format!("{name}: {e}"))
}

fn compactness() -> Outcome {
    fn traced_nodes(shards: u32, k: usize) -> usize {
        let mut t = Tracer::new(ClientId(0));
        let s = t.declare_slice(VirtualSlice {
            id: SliceId(0),
            shape: vec![shards],
            island: None,
            exclusive: false,
        });
        let mut v = t.arg(shards, 1 << 20);
        for i in 0..k {
            let f = Arc::new(CompiledFunction::new(&format!("a{i}"), shards, 1_000).with_io(&[1 << 20], &[1 << 20]));
            v = t.call(&f, s, &[v]).unwrap()[0];
        }
        t.finish(&[v]).unwrap().graph.nodes.len()
    }
    let fixed = traced_nodes(1024, 2);
    if fixed != 4 {
        return Err(format!("2-computation chain with 1024 shards has {fixed} nodes"));
    }
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(1u32..=4096, 1usize..=16), |(n, k)| {
            proptest::prop_assert_eq!(traced_nodes(n, k), k + 2);
            Ok(())
        })
        .map_err(|e| format!("property failed: {e}"))?;
    Ok("N=1024 chain of 2 has 4 nodes; 256 random (N, k) chains have k + 2".into())
}

fn deadlock(runs: &mut Runs) -> Outcome {
    let out = runs.get("deadlock")?;
    let mut independent_dead = 0;
    let mut ticketed_dead = 0;
    let mut ticketed_orders = 0;
    for r in rows(out) {
        let dead = r["deadlocked"].as_u64().unwrap();
        match r["mode"].as_str().unwrap() {
            "independent" => independent_dead += dead,
            _ => {
                ticketed_dead += dead;
                ticketed_orders += r["orders"].as_u64().unwrap();
            }
        }
    }
    check(
        independent_dead >= 1 && ticketed_dead == 0,
        format!(
            "independent ordering deadlocks in {independent_dead} interleavings; \
             scheduler in {ticketed_dead} of {ticketed_orders}"
        ),
    )
}

fn dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: Vec<_> = (0..1000)
        .map(|_| {
            let nodes = rng.gen_range(1..=5usize);
            let us = |rng: &mut ChaCha8Rng, hi: u64| rng.gen_range(0..=hi) * 1_000;
            let cost = CostModel {
                client_rpc_ns: us(&mut rng, 100),
                decision_ns: us(&mut rng, 50),
                fanout_ns_per_host: us(&mut rng, 50),
                host_prep_ns: us(&mut rng, 2_000),
                ..CostModel::default()
            };
            let mut cfg = ClusterConfig::uniform(1, nodes as u32, 1);
            cfg.pcie.latency_ns = us(&mut rng, 20);
            cfg.dcn.latency_ns = us(&mut rng, 100);
            cfg.islands[0].ici.latency_ns = us(&mut rng, 10);
            cfg.islands[0].ici.gbps = rng.gen_range(1.0..200.0);
            let t = us(&mut rng, 2_000);
            let bytes = rng.gen_range(0..=4_000_000u64);
            (nodes, cost, cfg, t, bytes)
        })
        .collect();
    let results = flowpath::sweep::map(&cases, |(nodes, cost, cfg, t, bytes)| {
        let topo = Arc::new(Topology::new(cfg).unwrap());
        let placements: Vec<Vec<DeviceId>> = (0..*nodes).map(|i| vec![DeviceId(i as u32)]).collect();
        let p = Arc::new(chain(&topo, "f", &placements, *nodes, *t, *bytes).unwrap());
        let span = |mode| {
            let c = RuntimeConfig {
                cost: cost.clone(),
                dispatch: mode,
                ..RuntimeConfig::default()
            };
            let e = run(&topo, &c, vec![ClientPlan::new(ClientId(0), p.clone(), 1)]).unwrap();
            let (a, b) = e.clients[0].run_spans[0];
            b - a
        };
        let seq = span(DispatchMode::Sequential);
        let par = span(DispatchMode::Parallel);
        let x = if *nodes > 1 {
            topo.transfer_ns(DeviceId(0), DeviceId(1), *bytes)
        } else {
            0
        };
        let must_be_strict = *nodes > 1 && cost.host_prep_ns > t + x;
        (seq, par, must_be_strict)
    });
    let worse = results.iter().filter(|(s, p, _)| p > s).count();
    let strict_cases = results.iter().filter(|r| r.2).count();
    let not_strict = results.iter().filter(|(s, p, strict)| *strict && p >= s).count();
    check(
        worse == 0 && not_strict == 0 && strict_cases > 0,
        format!(
            "{} chains: parallel slower in {worse}; h > t + transfer in {strict_cases}, not strictly faster in {not_strict}",
            results.len()
        ),
    )
}

fn crossover(runs: &mut Runs) -> Outcome {
    let out = runs.get("crossover")?;
    let pts: Vec<(u64, Option<u64>)> = rows(out)
        .iter()
        .map(|r| (r["hosts"].as_u64().unwrap(), r["crossover_ns"].as_u64()))
        .collect();
    let finite = pts.iter().all(|(_, t)| t.is_some());
    let ts: Vec<u64> = pts.iter().filter_map(|(_, t)| *t).collect();
    let monotone = ts.windows(2).all(|w| w[0] <= w[1]);
    let growth = match (ts.first(), ts.last()) {
        (Some(&a), Some(&b)) if a > 0 => b as f64 / a as f64,
        _ => f64::NAN,
    };
    let shown: Vec<String> = pts
        .iter()
        .map(|(h, t)| {
            format!(
                "{h}h={}",
                t.map_or("inf".into(), |t| format!("{:.3}ms", t as f64 / 1e6))
            )
        })
        .collect();
    check(
        finite && monotone && growth >= 5.0,
        format!("{}; growth {growth:.2}x (need >= 5x)", shown.join(" ")),
    )
}

fn parity(runs: &mut Runs) -> Outcome {
    let out = runs.get("parity")?;
    let worst = rows(out)
        .iter()
        .map(|r| (f(r, "ratio") - 1.0).abs())
        .fold(0.0, f64::max);
    let hosts: Vec<u64> = rows(out).iter().filter_map(|r| r["hosts"].as_u64()).collect();
    check(
        worst <= 0.01 && !hosts.is_empty(),
        format!(
            "t = 10x per-node overhead, hosts {}..={}: worst |ratio - 1| = {:.4}% (limit 1%)",
            hosts.first().unwrap_or(&0),
            hosts.last().unwrap_or(&0),
            worst * 100.0
        ),
    )
}

fn share(runs: &mut Runs) -> Outcome {
    let out = runs.get("share")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for r in rows(out) {
        let weights: Vec<u64> = r["weights"]
            .as_array()
            .unwrap()
            .iter()
            .map(|w| w.as_u64().unwrap())
            .collect();
        let equal = weights.iter().all(|w| *w == weights[0]);
        let limit = if equal { 0.02 } else { 0.05 };
        let err = f(r, "relative_error");
        ok &= err <= limit && r["gangs"].as_u64().unwrap() >= 10_000;
        parts.push(format!("{:?}#{}:{:.4}", weights, r["client"], f(r, "share")));
    }
    check(
        ok,
        format!("shares {} (5% / 2% limits, >= 10000 gangs)", parts.join(" ")),
    )
}

fn multitenancy(runs: &mut Runs) -> Outcome {
    let out = runs.get("multitenancy")?;
    let util: Vec<(u64, f64)> = rows(out)
        .iter()
        .map(|r| (r["clients"].as_u64().unwrap(), f(r, "utilization")))
        .collect();
    let single = util.iter().find(|(k, _)| *k == 1).map(|x| x.1).unwrap_or(f64::NAN);
    let sixteen = util.iter().find(|(k, _)| *k == 16).map(|x| x.1).unwrap_or(f64::NAN);
    let ok = sixteen >= 0.95 && util.iter().all(|(_, u)| *u >= single);
    let shown: Vec<String> = util.iter().map(|(k, u)| format!("k={k}:{u:.3}")).collect();
    check(ok, format!("utilization {} (k=16 needs >= 0.95)", shown.join(" ")))
}

fn pipeline(runs: &mut Runs) -> Outcome {
    let out = runs.get("pipeline")?;
    let params = &out.results.params;
    let cluster = cluster_for("pipeline");
    let bytes = params["bytes"].as_u64().unwrap();
    let dcn_ns = cluster.dcn.latency_ns as f64 + bytes as f64 / cluster.dcn.gbps;
    let stage_ns = params["stage_ms"].as_f64().unwrap() * 1e6;
    let mut ok = stage_ns >= dcn_ns;
    let mut parts = Vec::new();
    for r in rows(out) {
        let err = f(r, "relative_error");
        let split = (f(r, "vs_first_split") - 1.0).abs();
        ok &= err <= 0.01 && split <= 0.01;
        parts.push(format!(
            "S{}M{}x{}i:{:.4}/{:.4}",
            r["stages"],
            r["microbatches"],
            r["islands"],
            f(r, "busy_fraction"),
            f(r, "oracle")
        ));
    }
    check(
        ok,
        format!("busy/oracle {}; cross-island throughput within 1%", parts.join(" ")),
    )
}

#[derive(Clone, Debug)]
enum Msg {
    T(u32, u32),
    P(u32, BTreeMap<u32, u32>),
}

fn distinct_orders(msgs: &[Msg]) -> Vec<Vec<usize>> {
    fn go(msgs: &[Msg], used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == msgs.len() {
            out.push(cur.clone());
            return;
        }
        let mut tried: Vec<String> = Vec::new();
        for i in 0..msgs.len() {
            let key = format!("{:?}", msgs[i]);
            if used[i] || tried.contains(&key) {
                continue;
            }
            tried.push(key);
            used[i] = true;
            cur.push(i);
            go(msgs, used, cur, out);
            cur.pop();
            used[i] = false;
        }
    }
    let mut out = Vec::new();
    go(msgs, &mut vec![false; msgs.len()], &mut Vec::new(), &mut out);
    out
}

/// Brute force: replay the delivered prefix and decide completeness of `dst`.
fn oracle_ready(prefix: &[&Msg], dst: u32) -> bool {
    let mut seen = [0u32; 2];
    let mut punct: [Option<u32>; 2] = [None, None];
    for m in prefix {
        match m {
            Msg::T(s, d) if *d == dst => seen[*s as usize] += 1,
            Msg::P(s, counts) => punct[*s as usize] = Some(counts.get(&dst).copied().unwrap_or(0)),
            _ => {}
        }
    }
    (0..2).all(|s| punct[s] == Some(seen[s]))
}

fn progress() -> Outcome {
    let inst = InstanceId(0);
    let mut orders_checked = 0u64;
    let mut failures = Vec::new();
    // Every 2x2 count matrix with at most 6 tuples (8 messages with both
    // punctuations), in every distinct delivery order.
    for code in 0..81u32 {
        let c: Vec<u32> = (0..4).map(|i| (code / 3u32.pow(i)) % 3).collect();
        if c.iter().sum::<u32>() > 6 {
            continue;
        }
        let mut msgs = Vec::new();
        for s in 0..2u32 {
            let mut counts = BTreeMap::new();
            for d in 0..2u32 {
                let n = c[(s * 2 + d) as usize];
                for _ in 0..n {
                    msgs.push(Msg::T(s, d));
                }
                if n > 0 {
                    counts.insert(d, n);
                }
            }
            msgs.push(Msg::P(s, counts));
        }
        for order in distinct_orders(&msgs) {
            orders_checked += 1;
            let mut t = ProgressTracker::new(vec![NodeInputs {
                node: NodeId(1),
                shards: 2,
                edges: vec![EdgeInputs {
                    edge: EdgeId(0),
                    src_shards: 2,
                    senders: Senders::All,
                }],
            }]);
            t.start(inst).unwrap();
            let mut fired = [0u32; 2];
            for (k, &i) in order.iter().enumerate() {
                let ready = match &msgs[i] {
                    Msg::T(s, d) => t
                        .on_tuple(&DataTuple {
                            edge: EdgeId(0),
                            instance: inst,
                            src: *s,
                            dst: *d,
                            bytes: 1,
                        })
                        .map(|r| r.into_iter().collect::<Vec<_>>()),
                    Msg::P(s, counts) => t.on_punctuation(&Punctuation {
                        edge: EdgeId(0),
                        instance: inst,
                        src: *s,
                        counts: counts.clone(),
                    }),
                };
                let ready = match ready {
                    Ok(r) => r,
                    Err(e) => {
                        failures.push(format!("{c:?} {order:?}: {e}"));
                        break;
                    }
                };
                let before: Vec<&Msg> = order[..k].iter().map(|&j| &msgs[j]).collect();
                let after: Vec<&Msg> = order[..=k].iter().map(|&j| &msgs[j]).collect();
                for d in 0..2u32 {
                    let fires = ready.iter().any(|r| r.shard == d);
                    let should = oracle_ready(&after, d) && !oracle_ready(&before, d);
                    if fires != should {
                        failures.push(format!("{c:?} {order:?}: shard {d} fired={fires} oracle={should}"));
                    }
                    fired[d as usize] += fires as u32;
                }
            }
            if fired != [1, 1] {
                failures.push(format!("{c:?} {order:?}: fired {fired:?}"));
            }
        }
    }
    check(
        failures.is_empty(),
        match failures.first() {
            None => format!("{orders_checked} delivery orders of <= 8 messages agree with the replay oracle"),
            Some(f) => format!("{} mismatches, first: {f}", failures.len()),
        },
    )
}

fn hygiene(runs: &mut Runs) -> Outcome {
    let mut bad = Vec::new();
    let mut audited = 0;
    for name in ["dispatch", "pipeline", "multitenancy", "share"] {
        for r in rows(runs.get(name)?) {
            audited += 1;
            if r["audit_ok"] != true {
                bad.push(format!("{name} row {r}"));
            }
        }
    }
    // crossover and parity abort on a failed audit, so reaching here means clean.
    runs.get("crossover")?;
    runs.get("parity")?;

    // Failure injection: one of four clients dies at various points.
    let topo = Arc::new(Topology::new(&ClusterConfig::uniform(1, 2, 2)).unwrap());
    let mut b = ProgramBuilder::new(&topo, ClientId(0));
    let s0 = b.slice(&[DeviceId(0), DeviceId(1)]);
    let s1 = b.slice(&[DeviceId(2), DeviceId(3)]);
    let a = b.arg(2, 1 << 20);
    let f = |n: &str| {
        CompiledFunction::new(n, 2, 200_000)
            .with_io(&[1 << 20], &[1 << 20])
            .collective(true)
    };
    let x = b.call(f("x"), s0, &[a]).unwrap()[0];
    let y = b.call(f("y"), s1, &[x]).unwrap()[0];
    let z = b.call(f("z"), s0, &[y]).unwrap()[0];
    let p = Arc::new(b.finish("abc", &[z, y]).unwrap());
    let fail_times = [0u64, 50_000, 250_000, 600_000, 1_500_000, 4_000_000];
    for &at in &fail_times {
        let plans = (0..4)
            .map(|c| {
                let plan = ClientPlan::new(ClientId(c), p.clone(), 6).pacing(Pacing::AwaitResults);
                if c == 1 {
                    plan.fail_at(at)
                } else {
                    plan
                }
            })
            .collect();
        let e = run(&topo, &RuntimeConfig::default(), plans).map_err(|e| e.to_string())?;
        let survivors_done = e
            .clients
            .iter()
            .filter(|c| c.client != ClientId(1))
            .all(|c| c.runs_completed == 6);
        if !e.hygiene.clean() || !survivors_done || !e.clients[1].failed {
            bad.push(format!("failure at {at}ns: {:?}", e.hygiene));
        }
    }
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!(
                "{audited} benchmark rows audited clean; client failure at {} points leaves every device at full capacity, no double frees",
                fail_times.len()
            )
        } else {
            bad.join("; ")
        },
    )
}

fn determinism(runs: &mut Runs) -> Outcome {
    let mut differing = Vec::new();
    for name in bench::BENCHMARKS {
        let first = runs.get(name)?;
        let (r1, t1, e1) = (first.results.to_json(), first.trace_json(), first.events_ndjson());
        let second = run_bench(name)?;
        if r1 != second.results.to_json() || t1 != second.trace_json() || e1 != second.events_ndjson() {
            differing.push(*name);
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} benchmarks rerun with the same seed: results, traces and event logs byte-identical",
                bench::BENCHMARKS.len()
            )
        } else {
            format!("outputs differ for {differing:?}")
        },
    )
}

fn main() -> ExitCode {
    let mut runs = Runs::default();
    type Crit<'a> = (
        u32,
        &'static str,
        Option<Duration>,
        Box<dyn FnMut(&mut Runs) -> Outcome + 'a>,
    );
    let s = Duration::from_secs;
    let criteria: Vec<Crit> = vec![
        (1, "compactness", Some(s(1)), Box::new(|_| compactness())),
        (2, "gang-scheduling deadlock freedom", Some(s(10)), Box::new(deadlock)),
        (3, "parallel-dispatch dominance", Some(s(30)), Box::new(|_| dominance())),
        (4, "crossover monotonicity", Some(s(120)), Box::new(crossover)),
        (5, "throughput parity when compute-bound", Some(s(60)), Box::new(parity)),
        (6, "proportional share", Some(s(60)), Box::new(share)),
        (7, "multi-tenancy utilization", Some(s(60)), Box::new(multitenancy)),
        (8, "pipeline bubble oracle", Some(s(120)), Box::new(pipeline)),
        (
            9,
            "progress-tracking oracle equivalence",
            Some(s(30)),
            Box::new(|_| progress()),
        ),
        (10, "store hygiene", None, Box::new(hygiene)),
        (11, "determinism", None, Box::new(determinism)),
    ];
    let mut failed = 0;
    for (n, name, budget, mut check) in criteria {
        let start = Instant::now();
        let outcome = check(&mut runs);
        let took = start.elapsed();
        let over = budget.is_some_and(|b| took > b);
        let budget_note = budget.map_or(String::new(), |b| format!(", budget {}s", b.as_secs()));
        let (status, detail) = match outcome {
            Ok(d) if !over => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over time budget")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "{status} criterion {n:>2} {name}: {detail} [{:.2}s{budget_note}]",
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
