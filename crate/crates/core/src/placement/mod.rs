//! Device assignment and partitioning into per-device subgraphs.

mod device;
mod partition;
mod place;

pub use device::{DevicePattern, DeviceSpec};
pub use partition::{control_edge_name, partition, PartitionSet};
pub use place::{place, DeviceAssignment};
