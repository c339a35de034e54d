//! Domain logic for the home-care system: simulated sensors and actuators,
//! the scenario rule engine, the patient-side agent, QR tag sizing and the
//! latency bench. Every component is a sans-IO state machine with an async
//! runner that connects it to a broker.

pub mod bench;
pub mod devices;
pub mod notification;
pub mod patient;
pub mod qr;
pub mod rules;
pub mod scenario;
pub mod script;

pub use notification::{Modality, Notification, RenderCosts};

/// Default topology shipped with the crate.
pub const DEFAULT_TOPOLOGY: &str = include_str!("../config/topology.toml");
/// Default rule set shipped with the crate.
pub const DEFAULT_RULES: &str = include_str!("../config/rules.toml");
