use std::collections::BTreeMap;
use std::sync::Mutex;

use aal_core::devices::COMMAND_SUFFIX;
use tokio::sync::mpsc;

use crate::frames::encode_payload;

/// A broker delivery, payload already encoded for JSON.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HubEntry {
    pub topic: String,
    pub payload: String,
    pub binary: bool,
    pub retain: bool,
    pub server_time: u64,
}

#[derive(Default)]
struct HubState {
    state: BTreeMap<String, HubEntry>,
    subscribers: Vec<mpsc::UnboundedSender<HubEntry>>,
}

/// Last-known state plus fan-out to connected dashboards.
///
/// The snapshot holds every retained delivery and the latest value of each
/// `home/` state topic, since the broker clears the retain flag on live
/// forwards. Attaching and publishing share one lock, so a dashboard sees
/// each message either in its snapshot or live, never both or neither.
#[derive(Default)]
pub struct Hub {
    inner: Mutex<HubState>,
}

impl Hub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, topic: &str, payload: &[u8], retain: bool, server_time: u64) {
        let (text, binary) = encode_payload(payload);
        let entry = HubEntry {
            topic: topic.to_owned(),
            payload: text,
            binary,
            retain,
            server_time,
        };
        let mut inner = self.inner.lock().unwrap();
        if retain || is_state_topic(topic) {
            if payload.is_empty() {
                inner.state.remove(topic);
            } else {
                inner.state.insert(
                    topic.to_owned(),
                    HubEntry {
                        retain: true,
                        ..entry.clone()
                    },
                );
            }
        }
        inner.subscribers.retain(|tx| tx.send(entry.clone()).is_ok());
    }

    /// Returns the snapshot, ordered by topic, and the live feed that
    /// continues right after it.
    pub fn attach(&self) -> (Vec<HubEntry>, mpsc::UnboundedReceiver<HubEntry>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut inner = self.inner.lock().unwrap();
        inner.subscribers.push(tx);
        (inner.state.values().cloned().collect(), rx)
    }

    pub fn subscriber_count(&self) -> usize {
        let mut inner = self.inner.lock().unwrap();
        inner.subscribers.retain(|tx| !tx.is_closed());
        inner.subscribers.len()
    }
}

fn is_state_topic(topic: &str) -> bool {
    topic.starts_with("home/") && !topic.ends_with(COMMAND_SUFFIX)
}
