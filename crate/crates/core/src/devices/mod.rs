//! Simulated sensors and actuators under `home/<location>/<device_id>`.
//! Actuators take commands on `<topic>/set` and confirm on `<topic>`.

mod fleet;
mod kind;
mod runner;
mod topology;

pub use fleet::{Emission, Fleet, FleetError, StateChange};
pub use kind::{DeviceKind, KindRegistry, Reading, ValueError};
pub use runner::{FleetHandle, FleetRunner, RunnerError};
pub use topology::{DeviceSpec, Location, Topology, TopologyError};

pub const COMMAND_SUFFIX: &str = "/set";
