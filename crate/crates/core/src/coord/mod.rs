//! Coordination substrate: per-program dataflow instances, count-based
//! input readiness, and batching of control messages.

mod batcher;
mod dataflow;
mod progress;

use thiserror::Error;

pub use batcher::{BatchPolicy, Enqueued, MessageBatcher};
pub use dataflow::{Coordinator, DataflowInstance, NodePlacement};
pub use progress::{DataTuple, EdgeInputs, NodeInputs, ProgressTracker, Punctuation, Senders, ShardReady};

use crate::ids::InstanceId;
use crate::ir::EdgeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoordError {
    #[error("program graph is not lowered")]
    NotLowered,
    #[error("instance {0} already exists")]
    DuplicateInstance(InstanceId),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("unknown edge {}", .0 .0)]
    UnknownEdge(EdgeId),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}
