//! Deterministic, single-threaded network for tests and simulations.
//!
//! Every packet still goes through the real codec in both directions; only
//! the sockets and the wall clock are replaced. Time moves only when the
//! caller advances it.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;

use crate::broker::{Action, Broker, BrokerConfig, ConnId};
use crate::codec::{
    encode_packet, Connect, ConnectReturnCode, DecodeError, Decoder, EncodeError, Packet, Publish,
    QoS, SubackCode, Subscribe, Unsubscribe,
};

#[derive(Debug, Error)]
pub enum VirtualError {
    #[error("connection {0} is closed")]
    Closed(ConnId),
    #[error("connection refused: {0:?}")]
    Refused(ConnectReturnCode),
    #[error("expected {expected} but the broker sent {got}")]
    Protocol { expected: &'static str, got: String },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// A PUBLISH as received by a virtual endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualDelivery {
    pub topic: String,
    pub payload: Bytes,
    pub qos: QoS,
    pub retain: bool,
    pub dup: bool,
    pub packet_id: Option<u16>,
}

#[derive(Debug, Default)]
struct Endpoint {
    open: bool,
    publishes: VecDeque<VirtualDelivery>,
    control: VecDeque<Packet>,
    next_packet_id: u16,
}

impl Endpoint {
    fn allocate(&mut self) -> u16 {
        self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
        self.next_packet_id
    }
}

pub struct VirtualNetwork {
    broker: Broker,
    decoder: Decoder,
    now: Duration,
    next_conn: ConnId,
    endpoints: BTreeMap<ConnId, Endpoint>,
}

impl VirtualNetwork {
    pub fn new(config: BrokerConfig) -> Self {
        Self::with_broker(Broker::new(config))
    }

    pub fn with_broker(broker: Broker) -> Self {
        VirtualNetwork {
            decoder: Decoder::new(broker.config().max_packet_bytes),
            broker,
            now: Duration::ZERO,
            next_conn: 1,
            endpoints: BTreeMap::new(),
        }
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn into_broker(self) -> Broker {
        self.broker
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    /// Moves the clock forward (never backward) and runs keepalive expiry.
    pub fn advance_to(&mut self, t: Duration) {
        self.now = self.now.max(t);
        let actions = self.broker.tick(self.now);
        self.apply(actions);
    }

    pub fn is_open(&self, conn: ConnId) -> bool {
        self.endpoints.get(&conn).is_some_and(|e| e.open)
    }

    /// Opens a connection and performs the CONNECT handshake. Returns the
    /// connection id and the session-present flag.
    pub fn connect(
        &mut self,
        client_id: &str,
        clean_session: bool,
        keep_alive: u16,
    ) -> Result<(ConnId, bool), VirtualError> {
        let conn = self.next_conn;
        self.next_conn += 1;
        self.endpoints.insert(
            conn,
            Endpoint {
                open: true,
                ..Endpoint::default()
            },
        );
        self.broker.connection_opened(conn, self.now);
        self.send(
            conn,
            Packet::Connect(Connect {
                client_id: client_id.to_owned(),
                clean_session,
                keep_alive,
            }),
        )?;
        match self.take_control(conn)? {
            Packet::Connack(ack) if ack.code == ConnectReturnCode::Accepted => {
                Ok((conn, ack.session_present))
            }
            Packet::Connack(ack) => Err(VirtualError::Refused(ack.code)),
            other => Err(VirtualError::Protocol {
                expected: "CONNACK",
                got: format!("{:?}", other.packet_type()),
            }),
        }
    }

    pub fn publish(
        &mut self,
        conn: ConnId,
        topic: &str,
        payload: impl Into<Bytes>,
        qos: QoS,
        retain: bool,
    ) -> Result<(), VirtualError> {
        let packet_id = match qos {
            QoS::AtMostOnce => None,
            _ => Some(self.endpoint(conn)?.allocate()),
        };
        self.send(
            conn,
            Packet::Publish(Publish {
                dup: false,
                qos,
                retain,
                topic: topic.to_owned(),
                packet_id,
                payload: payload.into(),
            }),
        )?;
        if let Some(id) = packet_id {
            match self.take_control(conn)? {
                Packet::Puback { packet_id } if packet_id == id => {}
                other => {
                    return Err(VirtualError::Protocol {
                        expected: "PUBACK",
                        got: format!("{other:?}"),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn subscribe(
        &mut self,
        conn: ConnId,
        filters: &[(&str, QoS)],
    ) -> Result<Vec<SubackCode>, VirtualError> {
        let packet_id = self.endpoint(conn)?.allocate();
        self.send(
            conn,
            Packet::Subscribe(Subscribe {
                packet_id,
                filters: filters.iter().map(|(f, q)| (f.to_string(), *q)).collect(),
            }),
        )?;
        match self.take_control(conn)? {
            Packet::Suback(s) if s.packet_id == packet_id => Ok(s.codes),
            other => Err(VirtualError::Protocol {
                expected: "SUBACK",
                got: format!("{other:?}"),
            }),
        }
    }

    pub fn unsubscribe(&mut self, conn: ConnId, filters: &[&str]) -> Result<(), VirtualError> {
        let packet_id = self.endpoint(conn)?.allocate();
        self.send(
            conn,
            Packet::Unsubscribe(Unsubscribe {
                packet_id,
                filters: filters.iter().map(|f| f.to_string()).collect(),
            }),
        )?;
        match self.take_control(conn)? {
            Packet::Unsuback { packet_id: id } if id == packet_id => Ok(()),
            other => Err(VirtualError::Protocol {
                expected: "UNSUBACK",
                got: format!("{other:?}"),
            }),
        }
    }

    pub fn ping(&mut self, conn: ConnId) -> Result<(), VirtualError> {
        self.send(conn, Packet::Pingreq)?;
        match self.take_control(conn)? {
            Packet::Pingresp => Ok(()),
            other => Err(VirtualError::Protocol {
                expected: "PINGRESP",
                got: format!("{other:?}"),
            }),
        }
    }

    /// Drains every pending PUBLISH, acknowledging QoS 1 ones. Acks can
    /// release backlogged messages, which are drained too.
    pub fn receive(&mut self, conn: ConnId) -> Vec<VirtualDelivery> {
        let mut out = Vec::new();
        while let Some(e) = self.endpoints.get_mut(&conn) {
            let batch: Vec<VirtualDelivery> = e.publishes.drain(..).collect();
            if batch.is_empty() {
                break;
            }
            for delivery in batch {
                if let Some(packet_id) = delivery.packet_id {
                    if self.is_open(conn) {
                        let _ = self.send(conn, Packet::Puback { packet_id });
                    }
                }
                out.push(delivery);
            }
        }
        out
    }

    /// Takes up to `max` pending PUBLISHes without acknowledging them.
    pub fn receive_unacked(&mut self, conn: ConnId, max: usize) -> Vec<VirtualDelivery> {
        match self.endpoints.get_mut(&conn) {
            Some(e) => {
                let n = max.min(e.publishes.len());
                e.publishes.drain(..n).collect()
            }
            None => Vec::new(),
        }
    }

    /// Graceful DISCONNECT.
    pub fn disconnect(&mut self, conn: ConnId) -> Result<(), VirtualError> {
        self.send(conn, Packet::Disconnect)?;
        self.endpoints.remove(&conn);
        Ok(())
    }

    /// The transport dies without DISCONNECT; undelivered packets are lost.
    pub fn drop_connection(&mut self, conn: ConnId) {
        self.endpoints.remove(&conn);
        self.broker.connection_lost(conn, self.now);
    }

    fn endpoint(&mut self, conn: ConnId) -> Result<&mut Endpoint, VirtualError> {
        match self.endpoints.get_mut(&conn) {
            Some(e) if e.open => Ok(e),
            _ => Err(VirtualError::Closed(conn)),
        }
    }

    fn take_control(&mut self, conn: ConnId) -> Result<Packet, VirtualError> {
        self.endpoints
            .get_mut(&conn)
            .and_then(|e| e.control.pop_front())
            .ok_or(VirtualError::Closed(conn))
    }

    fn send(&mut self, conn: ConnId, packet: Packet) -> Result<(), VirtualError> {
        self.endpoint(conn)?;
        let packet = self.wire(&packet)?;
        let actions = self.broker.handle_packet(conn, packet, self.now);
        self.apply(actions);
        Ok(())
    }

    fn wire(&self, packet: &Packet) -> Result<Packet, VirtualError> {
        let bytes = encode_packet(packet)?;
        match self.decoder.decode(&bytes)? {
            Some((decoded, used)) if used == bytes.len() => Ok(decoded),
            _ => Err(VirtualError::Protocol {
                expected: "a complete frame",
                got: format!("{} bytes", bytes.len()),
            }),
        }
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send { conn, packet } => {
                    let packet = self
                        .wire(&packet)
                        .expect("broker produced an unencodable packet");
                    let Some(endpoint) = self.endpoints.get_mut(&conn) else {
                        continue;
                    };
                    if !endpoint.open {
                        continue;
                    }
                    match packet {
                        Packet::Publish(p) => endpoint.publishes.push_back(VirtualDelivery {
                            topic: p.topic,
                            payload: p.payload,
                            qos: p.qos,
                            retain: p.retain,
                            dup: p.dup,
                            packet_id: p.packet_id,
                        }),
                        other => endpoint.control.push_back(other),
                    }
                }
                Action::Close { conn, .. } => {
                    if let Some(endpoint) = self.endpoints.get_mut(&conn) {
                        endpoint.open = false;
                    }
                }
            }
        }
    }
}
