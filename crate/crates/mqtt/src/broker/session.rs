use std::collections::VecDeque;
use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::codec::QoS;
use crate::topic;

pub type ConnId = u64;

/// An application message as the broker stores and routes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub topic: String,
    pub payload: Bytes,
    pub qos: QoS,
    pub retain: bool,
    pub enqueue_time: Duration,
}

impl Message {
    pub(crate) fn at_qos(&self, qos: QoS) -> Message {
        Message {
            qos: self.qos.min(qos),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub filter: String,
    pub qos: QoS,
}

/// Per-client broker state. Survives disconnects when `clean_session` is
/// false.
#[derive(Debug, Clone)]
pub struct Session {
    pub client_id: String,
    pub clean_session: bool,
    pub subscriptions: Vec<Subscription>,
    pub(crate) conn: Option<ConnId>,
    /// Messages held for a disconnected persistent session.
    pub(crate) offline_queue: VecDeque<Message>,
    /// QoS 1 messages sent and awaiting PUBACK, in send order.
    pub(crate) inflight: VecDeque<(u16, Message)>,
    /// Messages waiting for an inflight slot while connected.
    pub(crate) backlog: VecDeque<Message>,
    pub(crate) next_packet_id: u16,
}

impl Session {
    pub fn new(client_id: impl Into<String>, clean_session: bool) -> Self {
        Session {
            client_id: client_id.into(),
            clean_session,
            subscriptions: Vec::new(),
            conn: None,
            offline_queue: VecDeque::new(),
            inflight: VecDeque::new(),
            backlog: VecDeque::new(),
            next_packet_id: 1,
        }
    }

    pub fn connected(&self) -> bool {
        self.conn.is_some()
    }

    pub fn offline_queue(&self) -> &VecDeque<Message> {
        &self.offline_queue
    }

    pub fn inflight_ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.inflight.iter().map(|(id, _)| *id)
    }

    pub fn inflight_len(&self) -> usize {
        self.inflight.len()
    }

    /// Highest granted QoS among this session's filters matching `topic`.
    pub(crate) fn matching_qos(&self, topic_name: &str) -> Option<QoS> {
        self.subscriptions
            .iter()
            .filter(|s| topic::matches_unchecked(&s.filter, topic_name))
            .map(|s| s.qos)
            .max()
    }

    /// Adds or replaces the entry for `filter`.
    pub(crate) fn subscribe(&mut self, filter: &str, qos: QoS) {
        match self.subscriptions.iter_mut().find(|s| s.filter == filter) {
            Some(existing) => existing.qos = qos,
            None => self.subscriptions.push(Subscription {
                filter: filter.to_owned(),
                qos,
            }),
        }
    }

    pub(crate) fn unsubscribe(&mut self, filter: &str) {
        self.subscriptions.retain(|s| s.filter != filter);
    }

    /// Next packet id in 1..=65535 not currently in flight.
    pub(crate) fn allocate_packet_id(&mut self) -> u16 {
        loop {
            let id = self.next_packet_id;
            self.next_packet_id = if id == u16::MAX { 1 } else { id + 1 };
            if !self.inflight.iter().any(|(used, _)| *used == id) {
                return id;
            }
        }
    }

    pub(crate) fn ack(&mut self, packet_id: u16) -> bool {
        match self.inflight.iter().position(|(id, _)| *id == packet_id) {
            Some(pos) => {
                self.inflight.remove(pos);
                true
            }
            None => false,
        }
    }
}
