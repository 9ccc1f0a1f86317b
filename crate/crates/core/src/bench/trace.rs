use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use crate::exec::Execution;
use crate::hardware::DeviceId;

const PREP_LANE: u32 = 10_000;
const TRANSFER_LANE: u32 = 20_000;

/// One Chrome trace-event record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEvent {
    pub name: String,
    pub cat: &'static str,
    pub ph: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dur: Option<f64>,
    pub pid: u32,
    pub tid: u32,
    pub args: Value,
}

fn us(ns: u64) -> f64 {
    ns as f64 / 1_000.0
}

fn span(name: String, cat: &'static str, pid: u32, tid: u32, start: u64, end: u64, args: Value) -> TraceEvent {
    TraceEvent {
        name,
        cat,
        ph: "X",
        ts: Some(us(start)),
        dur: Some(us(end - start)),
        pid,
        tid,
        args,
    }
}

fn meta(kind: &str, pid: u32, tid: u32, name: String) -> TraceEvent {
    TraceEvent {
        name: kind.to_string(),
        cat: "__metadata",
        ph: "M",
        ts: None,
        dur: None,
        pid,
        tid,
        args: json!({ "name": name }),
    }
}

/// Spread possibly overlapping intervals over lanes so no lane overlaps.
fn lanes(mut spans: Vec<(u64, u64, usize)>) -> Vec<(usize, u32)> {
    spans.sort();
    let mut free_at: Vec<u64> = Vec::new();
    let mut out = Vec::with_capacity(spans.len());
    for (start, end, idx) in spans {
        let lane = match free_at.iter().position(|f| *f <= start) {
            Some(l) => l,
            None => {
                free_at.push(0);
                free_at.len() - 1
            }
        };
        free_at[lane] = end;
        out.push((idx, lane as u32));
    }
    out.sort();
    out
}

/// Kernels on device lanes (pid = host, tid = device), host preparation
/// and transfers on extra host lanes, and scheduler decisions on one
/// process per island after the hosts.
pub fn chrome_trace(e: &Execution) -> Vec<TraceEvent> {
    let topo = &e.topology;
    let mut out = Vec::new();
    let mut named: BTreeMap<(u32, u32), String> = BTreeMap::new();
    for s in &e.samples {
        let host = topo.host_of(DeviceId(s.device)).0;
        named.insert((host, s.device), format!("device {}", s.device));
        out.push(span(
            format!("n{}", s.node),
            "kernel",
            host,
            s.device,
            s.start_ns,
            s.end_ns,
            json!({ "program": s.instance, "client": s.client }),
        ));
    }
    let mut by_host: BTreeMap<u32, Vec<(u64, u64, usize)>> = BTreeMap::new();
    for (i, p) in e.prep_spans.iter().enumerate() {
        by_host.entry(p.host).or_default().push((p.start_ns, p.end_ns, i));
    }
    for (host, spans) in by_host {
        for (i, lane) in lanes(spans) {
            let p = &e.prep_spans[i];
            named.insert((host, PREP_LANE + lane), format!("prepare {lane}"));
            out.push(span(
                format!("prep n{}", p.node),
                "prep",
                host,
                PREP_LANE + lane,
                p.start_ns,
                p.end_ns,
                json!({ "program": p.instance }),
            ));
        }
    }
    let mut by_src: BTreeMap<u32, Vec<(u64, u64, usize)>> = BTreeMap::new();
    for (i, t) in e.transfer_records.iter().enumerate() {
        by_src
            .entry(topo.host_of(t.src).0)
            .or_default()
            .push((t.start.0, t.end.0, i));
    }
    for (host, spans) in by_src {
        for (i, lane) in lanes(spans) {
            let t = &e.transfer_records[i];
            named.insert((host, TRANSFER_LANE + lane), format!("transfer {lane}"));
            out.push(span(
                format!("d{}->d{}", t.src.0, t.dst.0),
                "transfer",
                host,
                TRANSFER_LANE + lane,
                t.start.0,
                t.end.0,
                json!({ "bytes": t.bytes }),
            ));
        }
    }
    let hosts = topo.hosts.len() as u32;
    for s in &e.sched_spans {
        named.insert((hosts + s.island, 0), "scheduler".to_string());
        out.push(span(
            format!("ticket n{}", s.node),
            "schedule",
            hosts + s.island,
            0,
            s.start_ns,
            s.end_ns,
            json!({ "program": s.instance }),
        ));
    }
    let mut metadata = Vec::new();
    let mut pids: BTreeMap<u32, ()> = BTreeMap::new();
    for ((pid, tid), name) in named {
        if pids.insert(pid, ()).is_none() {
            let pname = if pid < hosts {
                format!("host {pid}")
            } else {
                format!("island {} scheduler", pid - hosts)
            };
            metadata.push(meta("process_name", pid, 0, pname));
        }
        metadata.push(meta("thread_name", pid, tid, name));
    }
    metadata.extend(out);
    metadata
}
