//! MQTT 3.1.1 subset for a home-care messaging system: a bit-exact codec,
//! a broker with persistent sessions and retained messages, an async
//! client, and a virtual-time network that runs the broker deterministically.

pub mod broker;
pub mod client;
pub mod codec;
pub mod topic;
pub mod virtual_net;

pub use broker::{Broker, BrokerConfig, BrokerServer, ServerConfig};
pub use client::{Client, ClientConfig, ClientError, Delivery, Inbound, ReconnectPolicy};
pub use codec::{decode_packet, encode_packet, Packet, QoS};
pub use topic::topic_matches;
pub use virtual_net::{VirtualDelivery, VirtualNetwork};
