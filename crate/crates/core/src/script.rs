//! Event scripts: one event per line, `<sim_time_ms> <target> <value>`.
//!
//! `target` is a device id for a physical stimulus. Three prefixed targets
//! drive the other actors:
//!
//! ```text
//! 1000  set:drawer_relay  1      # caregiver command on the actuator's /set topic
//! 5000  qr:bedroom_door   400    # patient scans a tag; value is detect latency in ms
//! 9000  confirm           latest # patient confirms the newest prompt
//! ```
//!
//! Blank lines and `#` comments are ignored. Times must not decrease.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptAction {
    /// The device observes `value` and publishes it.
    Device { device_id: String, value: String },
    /// Someone publishes `value` on the device's command topic.
    Command { device_id: String, value: String },
    Scan { tag_id: String, latency: Duration },
    /// `None` confirms the most recent confirmable notification.
    Confirm { notif_id: Option<u64> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEvent {
    pub at: Duration,
    pub action: ScriptAction,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ScriptError {
    pub line: usize,
    pub reason: String,
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptEvent>, ScriptError> {
    let mut events = Vec::new();
    let mut last = Duration::ZERO;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |reason: String| ScriptError { line, reason };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let [time, target, value] = fields[..] else {
            return Err(err(format!(
                "expected `<ms> <target> <value>`, got {} fields",
                fields.len()
            )));
        };
        let ms: u64 = time
            .parse()
            .map_err(|_| err(format!("bad time {time:?}")))?;
        let at = Duration::from_millis(ms);
        if at < last {
            return Err(err(format!("time {ms} ms goes backwards")));
        }
        last = at;

        let action = if let Some(device_id) = target.strip_prefix("set:") {
            ScriptAction::Command {
                device_id: nonempty(device_id).map_err(err)?,
                value: value.to_owned(),
            }
        } else if let Some(tag_id) = target.strip_prefix("qr:") {
            let latency: u64 = value
                .parse()
                .map_err(|_| err(format!("bad scan latency {value:?}")))?;
            ScriptAction::Scan {
                tag_id: nonempty(tag_id).map_err(err)?,
                latency: Duration::from_millis(latency),
            }
        } else if target == "confirm" {
            let notif_id = match value {
                "latest" => None,
                id => Some(
                    id.parse()
                        .map_err(|_| err(format!("bad notification id {id:?}")))?,
                ),
            };
            ScriptAction::Confirm { notif_id }
        } else {
            ScriptAction::Device {
                device_id: target.to_owned(),
                value: value.to_owned(),
            }
        };
        events.push(ScriptEvent { at, action });
    }
    Ok(events)
}

fn nonempty(s: &str) -> Result<String, String> {
    if s.is_empty() {
        Err("empty target name".into())
    } else {
        Ok(s.to_owned())
    }
}
