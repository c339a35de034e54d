use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use tracing::warn;

use crate::notification::{Confirmation, Notification, CONFIRM_TOPIC, QR_PREFIX};
use crate::{Modality, RenderCosts};

/// Staring longer than this without a detection counts as a miss.
pub const SCAN_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanOutcome {
    /// Publish `"detected"` on `topic`.
    Detected { topic: String, at: Duration },
    Timeout { at: Duration },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScanError {
    #[error("another scan is in progress until {busy_until:?}")]
    Busy { busy_until: Duration },
    #[error("tag id must be a single topic level")]
    BadTag,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("malformed notification: {0}")]
    Malformed(String),
    #[error("notification {0} has nothing to confirm")]
    NotConfirmable(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderLogEntry {
    pub notif_id: u64,
    pub modality: Modality,
    pub asset_ref: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub receive_ns: u64,
    pub render_complete_ns: u64,
}

impl RenderLogEntry {
    pub fn receive_time(&self) -> Duration {
        Duration::from_nanos(self.receive_ns)
    }

    pub fn render_complete_time(&self) -> Duration {
        Duration::from_nanos(self.render_complete_ns)
    }
}

/// Sans-IO agent. Times are offsets on a clock supplied by the caller.
#[derive(Debug)]
pub struct PatientAgent {
    costs: RenderCosts,
    scan_busy_until: Option<Duration>,
    renderer_free_at: Duration,
    log: Vec<RenderLogEntry>,
    seen: HashSet<u64>,
    confirmable: BTreeMap<u64, String>,
}

impl PatientAgent {
    pub fn new(costs: RenderCosts) -> Self {
        PatientAgent {
            costs,
            scan_busy_until: None,
            renderer_free_at: Duration::ZERO,
            log: Vec::new(),
            seen: HashSet::new(),
            confirmable: BTreeMap::new(),
        }
    }

    pub fn costs(&self) -> RenderCosts {
        self.costs
    }

    /// A scan started at `start` occupies the camera until it detects or
    /// times out. Only one symbol can be recognized at a time.
    pub fn scan_qr(
        &mut self,
        tag_id: &str,
        start: Duration,
        detect_latency: Duration,
    ) -> Result<ScanOutcome, ScanError> {
        if tag_id.is_empty() || tag_id.contains(['/', '+', '#', '\0']) {
            return Err(ScanError::BadTag);
        }
        if let Some(busy_until) = self.scan_busy_until.filter(|t| start < *t) {
            return Err(ScanError::Busy { busy_until });
        }
        let detected = detect_latency <= SCAN_TIMEOUT;
        let end = start + detect_latency.min(SCAN_TIMEOUT);
        self.scan_busy_until = Some(end);
        Ok(if detected {
            ScanOutcome::Detected {
                topic: format!("{QR_PREFIX}{tag_id}"),
                at: end,
            }
        } else {
            ScanOutcome::Timeout { at: end }
        })
    }

    /// Renders one notification. Duplicates (redeliveries) return `None`.
    pub fn on_notification(
        &mut self,
        payload: &[u8],
        receive_time: Duration,
    ) -> Result<Option<RenderLogEntry>, AgentError> {
        let n = Notification::from_json(payload).map_err(AgentError::Malformed)?;
        Ok(self.render(n, receive_time))
    }

    /// Renders notifications that arrived together, in notif_id order.
    /// Malformed payloads are logged and dropped.
    pub fn on_notifications<'a>(
        &mut self,
        batch: impl IntoIterator<Item = (&'a [u8], Duration)>,
    ) -> Vec<RenderLogEntry> {
        let mut parsed: Vec<(Notification, Duration)> = batch
            .into_iter()
            .filter_map(|(raw, at)| match Notification::from_json(raw) {
                Ok(n) => Some((n, at)),
                Err(e) => {
                    warn!(error = %e, "malformed notification dropped");
                    None
                }
            })
            .collect();
        parsed.sort_by_key(|(n, _)| n.notif_id);
        parsed
            .into_iter()
            .filter_map(|(n, at)| self.render(n, at))
            .collect()
    }

    fn render(&mut self, n: Notification, receive_time: Duration) -> Option<RenderLogEntry> {
        if !self.seen.insert(n.notif_id) {
            return None;
        }
        let start = receive_time.max(self.renderer_free_at);
        let done = start + self.costs.cost(n.modality);
        self.renderer_free_at = done;
        if let Some(rule) = &n.confirm_rule {
            self.confirmable.insert(n.notif_id, rule.clone());
        }
        let entry = RenderLogEntry {
            notif_id: n.notif_id,
            modality: n.modality,
            asset_ref: n.asset_ref,
            text: n.text,
            receive_ns: receive_time.as_nanos() as u64,
            render_complete_ns: done.as_nanos() as u64,
        };
        self.log.push(entry.clone());
        Some(entry)
    }

    /// Newest confirmable prompt, if any.
    pub fn latest_confirmable(&self) -> Option<u64> {
        self.confirmable.keys().next_back().copied()
    }

    /// Returns the `patient/confirm` publish for a prompt.
    pub fn confirm(&mut self, notif_id: u64) -> Result<(String, String), AgentError> {
        let rule_id = self
            .confirmable
            .remove(&notif_id)
            .ok_or(AgentError::NotConfirmable(notif_id))?;
        let body = Confirmation {
            rule_id,
            notif_id: Some(notif_id),
        };
        Ok((
            CONFIRM_TOPIC.to_owned(),
            serde_json::to_string(&body).expect("confirmation serializes"),
        ))
    }

    /// Render log, newest first.
    pub fn history(&self) -> impl Iterator<Item = &RenderLogEntry> {
        self.log.iter().rev()
    }

    pub fn history_of(&self, modality: Modality) -> impl Iterator<Item = &RenderLogEntry> {
        self.history().filter(move |e| e.modality == modality)
    }

    /// Render log in render order.
    pub fn log(&self) -> &[RenderLogEntry] {
        &self.log
    }

    /// One JSON object per line, in render order.
    pub fn export_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for entry in &self.log {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
