//! Pre-training checkpoint averaging.
//!
//! - [`store`]: bit-exact checkpoint containers and trajectory manifests
//! - [`merge`]: SMA / EMA / WMA weights and deterministic weighted merges
//! - [`planner`]: choosing which checkpoints to merge along a trajectory
//! - [`testbed`]: a small deterministic trainer that produces real trajectories
//! - [`analysis`]: second-order checks of when averaging lowers the loss

pub mod analysis;
pub mod merge;
pub mod planner;
pub mod store;
pub mod testbed;
