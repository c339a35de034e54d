//! The central broker: sessions, topic routing, retained messages, QoS 1
//! delivery and store-and-forward for disconnected persistent sessions.

mod retained;
mod server;
mod session;
mod state;

pub use retained::RetainedStore;
pub use server::{BrokerServer, ServerConfig};
pub use session::{ConnId, Message, Session, Subscription};
pub use state::{Action, Broker, BrokerConfig, BrokerSnapshot, CloseReason, SessionSnapshot};
