use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use super::retained::RetainedStore;
use super::session::{ConnId, Message, Session, Subscription};
use crate::codec::{
    Connack, Connect, ConnectReturnCode, Packet, Publish, QoS, Suback, SubackCode, Subscribe,
    Unsubscribe, DEFAULT_MAX_PACKET_BYTES,
};
use crate::topic;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerConfig {
    pub max_packet_bytes: usize,
    pub offline_queue_cap: usize,
    /// QoS 1 messages allowed in flight per session before further
    /// deliveries wait in the session backlog.
    pub max_inflight: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            max_packet_bytes: DEFAULT_MAX_PACKET_BYTES,
            offline_queue_cap: 1024,
            max_inflight: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloseReason {
    ProtocolViolation(String),
    Refused,
    Disconnect,
    KeepaliveTimeout,
    Evicted,
}

/// Side effects the network layer must carry out, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send { conn: ConnId, packet: Packet },
    Close { conn: ConnId, reason: CloseReason },
}

#[derive(Debug, Clone)]
struct ConnState {
    client_id: Option<String>,
    keep_alive: u16,
    last_seen: Duration,
}

/// Broker state machine. Performs no IO and reads no clock: every input
/// carries its timestamp, so identical traces produce identical state.
#[derive(Debug, Clone)]
pub struct Broker {
    config: BrokerConfig,
    conns: BTreeMap<ConnId, ConnState>,
    sessions: BTreeMap<String, Session>,
    retained: RetainedStore,
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Broker {
            config,
            conns: BTreeMap::new(),
            sessions: BTreeMap::new(),
            retained: RetainedStore::default(),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn session(&self, client_id: &str) -> Option<&Session> {
        self.sessions.get(client_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn retained(&self) -> &RetainedStore {
        &self.retained
    }

    pub fn connection_count(&self) -> usize {
        self.conns.len()
    }

    pub fn connection_opened(&mut self, conn: ConnId, now: Duration) {
        self.conns.insert(
            conn,
            ConnState {
                client_id: None,
                keep_alive: 0,
                last_seen: now,
            },
        );
    }

    /// The transport went away (EOF, reset, or after we closed it).
    pub fn connection_lost(&mut self, conn: ConnId, _now: Duration) {
        self.detach(conn);
    }

    pub fn handle_packet(&mut self, conn: ConnId, packet: Packet, now: Duration) -> Vec<Action> {
        let mut out = Vec::new();
        let Some(state) = self.conns.get_mut(&conn) else {
            return out;
        };
        state.last_seen = now;
        let client_id = state.client_id.clone();

        match (client_id, packet) {
            (None, Packet::Connect(c)) => self.on_connect(conn, c, &mut out),
            (None, other) => self.close(
                conn,
                CloseReason::ProtocolViolation(format!(
                    "{:?} before CONNECT",
                    other.packet_type()
                )),
                &mut out,
            ),
            (Some(_), Packet::Connect(_)) => self.close(
                conn,
                CloseReason::ProtocolViolation("second CONNECT".into()),
                &mut out,
            ),
            (Some(id), Packet::Publish(p)) => self.on_publish(conn, &id, p, now, &mut out),
            (Some(id), Packet::Puback { packet_id }) => self.on_puback(conn, &id, packet_id, &mut out),
            (Some(id), Packet::Subscribe(s)) => self.on_subscribe(conn, &id, s, now, &mut out),
            (Some(id), Packet::Unsubscribe(u)) => self.on_unsubscribe(conn, &id, u, &mut out),
            (Some(_), Packet::Pingreq) => out.push(Action::Send {
                conn,
                packet: Packet::Pingresp,
            }),
            (Some(_), Packet::Disconnect) => self.close(conn, CloseReason::Disconnect, &mut out),
            (Some(_), other) => self.close(
                conn,
                CloseReason::ProtocolViolation(format!(
                    "unexpected {:?} from client",
                    other.packet_type()
                )),
                &mut out,
            ),
        }
        out
    }

    /// Closes connections silent for more than 1.5 times their keepalive.
    pub fn tick(&mut self, now: Duration) -> Vec<Action> {
        let expired: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, s)| {
                s.keep_alive > 0
                    && now.saturating_sub(s.last_seen)
                        > Duration::from_millis(s.keep_alive as u64 * 1500)
            })
            .map(|(id, _)| *id)
            .collect();
        let mut out = Vec::new();
        for conn in expired {
            self.close(conn, CloseReason::KeepaliveTimeout, &mut out);
        }
        out
    }

    fn close(&mut self, conn: ConnId, reason: CloseReason, out: &mut Vec<Action>) {
        let client_id = self.conns.get(&conn).and_then(|s| s.client_id.clone());
        match &reason {
            CloseReason::Disconnect => {
                info!(event = "disconnect", client_id = client_id.as_deref().unwrap_or("-"))
            }
            other => warn!(
                event = "close",
                client_id = client_id.as_deref().unwrap_or("-"),
                reason = ?other
            ),
        }
        out.push(Action::Close { conn, reason });
        self.detach(conn);
    }

    fn detach(&mut self, conn: ConnId) {
        let Some(state) = self.conns.remove(&conn) else {
            return;
        };
        let Some(client_id) = state.client_id else {
            return;
        };
        let Some(session) = self.sessions.get_mut(&client_id) else {
            return;
        };
        if session.conn != Some(conn) {
            return;
        }
        session.conn = None;
        if session.clean_session {
            self.sessions.remove(&client_id);
            return;
        }
        let backlog = std::mem::take(&mut session.backlog);
        session.offline_queue.extend(backlog);
        trim_queue(session, self.config.offline_queue_cap);
    }

    fn on_connect(&mut self, conn: ConnId, c: Connect, out: &mut Vec<Action>) {
        let client_id = if c.client_id.is_empty() {
            if !c.clean_session {
                out.push(Action::Send {
                    conn,
                    packet: Packet::Connack(Connack {
                        session_present: false,
                        code: ConnectReturnCode::IdentifierRejected,
                    }),
                });
                self.close(conn, CloseReason::Refused, out);
                return;
            }
            format!("auto-{conn}")
        } else {
            c.client_id
        };

        if let Some(old) = self.sessions.get(&client_id).and_then(|s| s.conn) {
            if old != conn {
                self.close(old, CloseReason::Evicted, out);
            }
        }

        let session_present = if c.clean_session {
            self.sessions
                .insert(client_id.clone(), Session::new(client_id.clone(), true));
            false
        } else if let Some(existing) = self.sessions.get_mut(&client_id) {
            existing.clean_session = false;
            true
        } else {
            self.sessions
                .insert(client_id.clone(), Session::new(client_id.clone(), false));
            false
        };

        if let Some(state) = self.conns.get_mut(&conn) {
            state.client_id = Some(client_id.clone());
            state.keep_alive = c.keep_alive;
        }
        info!(
            event = "connect",
            client_id = client_id.as_str(),
            clean_session = c.clean_session,
            session_present
        );
        out.push(Action::Send {
            conn,
            packet: Packet::Connack(Connack {
                session_present,
                code: ConnectReturnCode::Accepted,
            }),
        });

        let cap = self.config.max_inflight;
        let session = self.sessions.get_mut(&client_id).expect("session just inserted");
        session.conn = Some(conn);
        for (packet_id, message) in &session.inflight {
            out.push(Action::Send {
                conn,
                packet: publish_packet(message, Some(*packet_id), true),
            });
        }
        let queued = std::mem::take(&mut session.offline_queue);
        session.backlog.extend(queued);
        drain_backlog(session, conn, cap, out);
    }

    fn on_publish(
        &mut self,
        conn: ConnId,
        _from: &str,
        p: Publish,
        now: Duration,
        out: &mut Vec<Action>,
    ) {
        if let (QoS::AtLeastOnce, Some(packet_id)) = (p.qos, p.packet_id) {
            out.push(Action::Send {
                conn,
                packet: Packet::Puback { packet_id },
            });
        }
        let message = Message {
            topic: p.topic,
            payload: p.payload,
            qos: p.qos,
            retain: p.retain,
            enqueue_time: now,
        };
        debug!(event = "publish", client_id = _from, topic = message.topic.as_str());
        if message.retain {
            self.retained.update(&message);
        }
        let live = Message {
            retain: false,
            ..message
        };
        for session in self.sessions.values_mut() {
            if let Some(granted) = session.matching_qos(&live.topic) {
                deliver(session, live.at_qos(granted), &self.config, out);
            }
        }
    }

    fn on_puback(&mut self, _conn: ConnId, client_id: &str, packet_id: u16, out: &mut Vec<Action>) {
        let cap = self.config.max_inflight;
        if let Some(session) = self.sessions.get_mut(client_id) {
            if !session.ack(packet_id) {
                debug!(event = "puback_unknown", client_id, packet_id);
            }
            if let Some(conn) = session.conn {
                drain_backlog(session, conn, cap, out);
            }
        }
    }

    fn on_subscribe(
        &mut self,
        conn: ConnId,
        client_id: &str,
        s: Subscribe,
        now: Duration,
        out: &mut Vec<Action>,
    ) {
        let Some(session) = self.sessions.get_mut(client_id) else {
            return;
        };
        let mut codes = Vec::with_capacity(s.filters.len());
        let mut granted_filters = Vec::new();
        for (filter, requested) in s.filters {
            match topic::validate_topic_filter(&filter) {
                Ok(()) => {
                    let granted = requested.min(QoS::AtLeastOnce);
                    session.subscribe(&filter, granted);
                    codes.push(SubackCode::Granted(granted));
                    info!(event = "subscribe", client_id, topic = filter.as_str());
                    granted_filters.push((filter, granted));
                }
                Err(e) => {
                    warn!(event = "subscribe_rejected", client_id, topic = filter.as_str(), error = %e);
                    codes.push(SubackCode::Failure);
                }
            }
        }
        out.push(Action::Send {
            conn,
            packet: Packet::Suback(Suback {
                packet_id: s.packet_id,
                codes,
            }),
        });

        let mut replay: BTreeMap<&str, (QoS, &Message)> = BTreeMap::new();
        for (filter, granted) in &granted_filters {
            for message in self.retained.matching(filter) {
                let entry = replay.entry(&message.topic).or_insert((*granted, message));
                entry.0 = entry.0.max(*granted);
            }
        }
        for (_, (granted, message)) in replay {
            let copy = Message {
                retain: true,
                enqueue_time: now,
                ..message.at_qos(granted)
            };
            deliver(session, copy, &self.config, out);
        }
    }

    fn on_unsubscribe(
        &mut self,
        conn: ConnId,
        client_id: &str,
        u: Unsubscribe,
        out: &mut Vec<Action>,
    ) {
        if let Some(session) = self.sessions.get_mut(client_id) {
            for filter in &u.filters {
                session.unsubscribe(filter);
            }
        }
        out.push(Action::Send {
            conn,
            packet: Packet::Unsuback {
                packet_id: u.packet_id,
            },
        });
    }

    pub fn snapshot(&self) -> BrokerSnapshot {
        let sessions = self
            .sessions
            .values()
            .filter(|s| !s.clean_session)
            .map(|s| SessionSnapshot {
                client_id: s.client_id.clone(),
                subscriptions: s.subscriptions.clone(),
                queued: s
                    .inflight
                    .iter()
                    .map(|(_, m)| m.clone())
                    .chain(s.backlog.iter().cloned())
                    .chain(s.offline_queue.iter().cloned())
                    .collect(),
            })
            .collect();
        BrokerSnapshot {
            sessions,
            retained: self.retained.iter().cloned().collect(),
        }
    }

    /// Rebuilds a broker from a snapshot. All sessions start disconnected.
    pub fn restore(config: BrokerConfig, snapshot: BrokerSnapshot) -> Self {
        let mut broker = Broker::new(config);
        for m in &snapshot.retained {
            broker.retained.update(m);
        }
        for s in snapshot.sessions {
            let mut session = Session::new(s.client_id.clone(), false);
            session.subscriptions = s.subscriptions;
            session.offline_queue = VecDeque::from(s.queued);
            trim_queue(&mut session, broker.config.offline_queue_cap);
            broker.sessions.insert(s.client_id, session);
        }
        broker
    }
}

fn trim_queue(session: &mut Session, cap: usize) {
    while session.offline_queue.len() > cap {
        let dropped = session.offline_queue.pop_front();
        warn!(
            event = "offline_queue_overflow",
            client_id = session.client_id.as_str(),
            topic = dropped.as_ref().map(|m| m.topic.as_str()).unwrap_or("-")
        );
    }
}

fn publish_packet(message: &Message, packet_id: Option<u16>, dup: bool) -> Packet {
    Packet::Publish(Publish {
        dup,
        qos: message.qos,
        retain: message.retain,
        topic: message.topic.clone(),
        packet_id,
        payload: message.payload.clone(),
    })
}

fn deliver(session: &mut Session, message: Message, config: &BrokerConfig, out: &mut Vec<Action>) {
    match session.conn {
        Some(conn) => {
            session.backlog.push_back(message);
            drain_backlog(session, conn, config.max_inflight, out);
        }
        None => {
            session.offline_queue.push_back(message);
            trim_queue(session, config.offline_queue_cap);
        }
    }
}

fn drain_backlog(session: &mut Session, conn: ConnId, max_inflight: usize, out: &mut Vec<Action>) {
    while let Some(front) = session.backlog.front() {
        if front.qos == QoS::AtLeastOnce && session.inflight.len() >= max_inflight {
            break;
        }
        let message = session.backlog.pop_front().expect("front exists");
        let packet_id = match message.qos {
            QoS::AtMostOnce => None,
            _ => Some(session.allocate_packet_id()),
        };
        out.push(Action::Send {
            conn,
            packet: publish_packet(&message, packet_id, false),
        });
        if let Some(id) = packet_id {
            session.inflight.push_back((id, message));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub client_id: String,
    pub subscriptions: Vec<Subscription>,
    pub queued: Vec<Message>,
}

/// Persistent sessions and retained messages, written on shutdown.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BrokerSnapshot {
    pub sessions: Vec<SessionSnapshot>,
    pub retained: Vec<Message>,
}

impl BrokerSnapshot {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let raw = std::fs::read(path)?;
        serde_json::from_slice(&raw).map_err(std::io::Error::other)
    }
}
