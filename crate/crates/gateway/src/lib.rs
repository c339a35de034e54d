//! Caregiver gateway.
//!
//! Dashboards connect to `/events` and receive JSON text frames: the
//! current state snapshot first, then every broker delivery on `home/#`
//! and `patient/#` as it happens. Commands travel the other way on the
//! same socket. `GET /health` reports whether the upstream broker session
//! is up.

mod frames;
mod hub;
mod server;

pub use frames::{
    check_publish_topic, encode_payload, parse_command, CommandError, CommandFrame, GatewayCommand, GatewayEvent,
    ServerFrame, GATEWAY_NOTIF_BASE,
};
pub use hub::{Hub, HubEntry};
pub use server::{Gateway, GatewayConfig, GatewayError, UPSTREAM_FILTERS};
