pub mod bench;
pub mod coord;
pub mod exec;
pub mod hardware;
pub mod ids;
pub mod ir;
pub mod resman;
pub mod sched;
pub mod simcore;
pub mod store;
pub mod sweep;
