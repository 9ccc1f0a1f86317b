//! Program representation: compiled functions, the compact sharded dataflow
//! graph produced by the tracer, and lowering onto physical devices.

mod function;
mod graph;
mod json;
mod lower;
mod reshard;
mod trace;

use thiserror::Error;

pub use function::{CompiledFunction, TensorSpec, DEFAULT_LAYOUT};
pub use graph::{
    dispatch_segments, validate_regularity, Edge, EdgeId, GraphForm, Node, NodeId, NodeKind, ProgramGraph, Regularity,
    Segment, TracedProgram,
};
pub use json::{deserialize, deserialize_graph, digest, serialize, serialize_graph};
pub use lower::{lower, lower_graph};
pub use reshard::{ReshardKind, ReshardingSpec, ShardPair};
pub use trace::{trace, Call, Tracer, Value, ValueRef};

use crate::resman::SliceId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("invalid function `{name}`: {reason}")]
    InvalidFunction { name: String, reason: String },
    #[error("trace error: {0}")]
    Trace(String),
    #[error("slice {0} is not in the device map")]
    MissingSlice(SliceId),
    #[error("type error on edge {edge}: {reason}")]
    Type { edge: usize, reason: String },
    #[error("graph is not lowered")]
    NotLowered,
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
}

#[cfg(test)]
mod tests;
