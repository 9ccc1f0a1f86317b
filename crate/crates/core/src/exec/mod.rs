//! Host executors and the end-to-end runtime: clients submit programs, island
//! schedulers order gangs, hosts prepare and enqueue shards, devices run
//! them, and buffers are reference counted until freed.

mod baseline;
mod builder;
mod program;
mod runtime;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baseline::{multicontroller_baseline, order_interleavings, GangShape, InterleavingReport, OrderMode};
pub use builder::{chain, ProgramBuilder};
pub use program::{fuse, Program};
pub use runtime::{execute, ClientReport, Execution, Hygiene, KernelSample, PrepSpan, RtMsg, SchedSpan};

use crate::coord::BatchPolicy;
use crate::hardware::Topology;
use crate::ids::ClientId;
use crate::sched::{Policy, SchedError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error("capacity: {0}")]
    Capacity(String),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error("run ended in deadlock: {0}")]
    Deadlock(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Host-side and control-plane costs. Link costs come from the topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// One-way latency between a client and the control plane.
    pub client_rpc_ns: u64,
    /// Scheduler CPU per gang.
    pub decision_ns: u64,
    /// Scheduler CPU per host a gang touches.
    pub fanout_ns_per_host: u64,
    /// Host CPU to prepare one node.
    pub host_prep_ns: u64,
    /// Control messages exchanged per dataflow edge: future, address, and
    /// the punctuation carried with the data.
    pub control_msgs_per_edge: u32,
    pub batch: BatchPolicy,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            client_rpc_ns: 50_000,
            decision_ns: 10_000,
            fanout_ns_per_host: 20_000,
            host_prep_ns: 50_000,
            control_msgs_per_edge: 3,
            batch: BatchPolicy::default(),
        }
    }
}

impl CostModel {
    /// All control-plane costs zero.
    pub fn free() -> Self {
        CostModel {
            client_rpc_ns: 0,
            decision_ns: 0,
            fanout_ns_per_host: 0,
            host_prep_ns: 0,
            ..CostModel::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispatchMode {
    /// A host prepares a node only after its producers' hosts have enqueued.
    Sequential,
    /// Hosts prepare regular nodes as soon as they are granted.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubmitMode {
    /// One client call per node; the client waits for the enqueue ack.
    OpByOp,
    /// One client call per dispatch segment.
    Chained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pacing {
    OpenLoop,
    AwaitAck,
    AwaitResults,
}

#[derive(Clone, Debug)]
pub struct ClientPlan {
    pub client: ClientId,
    pub program: Arc<Program>,
    pub runs: u32,
    pub submit: SubmitMode,
    pub pacing: Pacing,
    pub start_ns: u64,
    pub fail_at_ns: Option<u64>,
}

impl ClientPlan {
    pub fn new(client: ClientId, program: Arc<Program>, runs: u32) -> Self {
        ClientPlan {
            client,
            program,
            runs,
            submit: SubmitMode::Chained,
            pacing: Pacing::AwaitResults,
            start_ns: 0,
            fail_at_ns: None,
        }
    }

    pub fn submit(mut self, m: SubmitMode) -> Self {
        self.submit = m;
        self
    }

    pub fn pacing(mut self, p: Pacing) -> Self {
        self.pacing = p;
        self
    }

    pub fn start_at(mut self, ns: u64) -> Self {
        self.start_ns = ns;
        self
    }

    pub fn fail_at(mut self, ns: u64) -> Self {
        self.fail_at_ns = Some(ns);
        self
    }
}

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    pub cost: CostModel,
    pub dispatch: DispatchMode,
    pub policy: Policy,
    pub window: Option<u32>,
    pub record_timeline: bool,
    pub event_log: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            cost: CostModel::default(),
            dispatch: DispatchMode::Parallel,
            policy: Policy::Fifo,
            window: None,
            record_timeline: false,
            event_log: false,
        }
    }
}

/// Convenience: run plans on a topology with a config.
pub fn run(topo: &Arc<Topology>, cfg: &RuntimeConfig, plans: Vec<ClientPlan>) -> Result<Execution, ExecError> {
    execute(topo.clone(), cfg.clone(), plans)
}

#[cfg(test)]
mod tests;
