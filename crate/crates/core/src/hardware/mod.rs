//! Accelerator islands, hosts, devices and interconnects.
//!
//! Devices run one kernel at a time and never preempt it. Collectives
//! rendezvous: no member runs until every member has reached the head of its
//! queue. Transfers use a dedicated DMA path and overlap compute.

pub mod config;
pub mod fabric;
pub mod hbm;
pub mod topology;

use thiserror::Error;

pub use config::{ClusterConfig, IslandConfig, LinkConfig};
pub use fabric::{
    CollectiveSpec, Fabric, FabricModel, FabricMsg, FabricNotice, KernelExec, KernelId, KernelLabel, KernelRecord,
    TransferId, TransferRecord,
};
pub use hbm::{AllocOutcome, BufferId, Grant, HbmPool};
pub use topology::{DeviceId, HostId, IslandId, LinkClass, LinkKind, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HardwareError {
    #[error("invalid cluster config: {0}")]
    Config(String),
    #[error("unknown device {0:?}")]
    UnknownDevice(DeviceId),
    #[error("allocation of {requested} bytes exceeds device capacity {capacity}")]
    ExceedsCapacity { requested: u64, capacity: u64 },
    #[error("unknown or already freed buffer {0:?}")]
    UnknownBuffer(BufferId),
}
