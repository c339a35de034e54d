//! Patient-side agent: QR scanning with a 3 s detection timeout, serial
//! rendering of received notifications, and confirmations.

mod agent;
mod runner;

pub use agent::{
    AgentError, PatientAgent, RenderLogEntry, ScanError, ScanOutcome, SCAN_TIMEOUT,
};
pub use runner::{AgentHandle, AgentRunner, RunnerError};
