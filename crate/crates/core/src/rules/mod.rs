//! Data-driven scenario rules: a trigger (topic filter and payload
//! predicate) fires an ordered list of actuator commands and patient
//! notifications, optionally gated on a patient confirmation.

mod config;
mod engine;
mod predicate;
mod runner;

pub use config::{Action, Confirmation, NotifySpec, Rule, RuleError, RuleSet};
pub use engine::{Emitted, PendingConfirmation, RuleEngine};
pub use predicate::{PayloadError, Predicate, PredicateFactory, PredicateRegistry};
pub use runner::{EngineHandle, EngineRunner, ENGINE_SUBSCRIPTIONS};
