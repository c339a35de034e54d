use std::collections::BTreeSet;

use aal_core::notification::NOTIFY_PREFIX;
use aal_core::Modality;
use aal_mqtt::topic::validate_topic_name;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Notification ids allocated by the gateway start here, far above the ids
/// the rule engine hands out.
pub const GATEWAY_NOTIF_BASE: u64 = 1_000_000_000;

/// One broker delivery as seen by a dashboard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayEvent {
    pub seq: u64,
    pub topic: String,
    /// UTF-8 text, or base64 when `binary` is set.
    pub payload: String,
    pub binary: bool,
    pub retain: bool,
    /// Unix time in milliseconds when the gateway received the message.
    pub server_time: u64,
}

/// Everything the gateway sends on `/events`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Event(GatewayEvent),
    /// Marks the end of the snapshot; later events are live.
    SnapshotEnd { count: usize },
    Ack {
        seq: Option<u64>,
        topic: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        notif_id: Option<u64>,
    },
    Error { seq: Option<u64>, error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum GatewayCommand {
    Publish {
        topic: String,
        payload: String,
        #[serde(default)]
        binary: bool,
    },
    Notify {
        modality: Modality,
        asset: String,
        #[serde(default)]
        text: Option<String>,
    },
}

/// A command together with the client's sequence number, echoed in the
/// reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandFrame {
    pub seq: Option<u64>,
    pub command: GatewayCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}")]
pub struct CommandError {
    pub seq: Option<u64>,
    pub reason: String,
}

impl CommandError {
    pub fn new(seq: Option<u64>, reason: impl Into<String>) -> Self {
        CommandError {
            seq,
            reason: reason.into(),
        }
    }

    pub fn into_frame(self) -> ServerFrame {
        ServerFrame::Error {
            seq: self.seq,
            error: self.reason,
        }
    }
}

pub fn parse_command(text: &str) -> Result<CommandFrame, CommandError> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CommandError::new(None, format!("invalid JSON: {e}")))?;
    let Some(obj) = value.as_object_mut() else {
        return Err(CommandError::new(None, "command must be a JSON object"));
    };
    let seq = match obj.remove("seq") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| CommandError::new(None, "seq must be a non-negative integer"))?,
        ),
    };
    let command: GatewayCommand =
        serde_json::from_value(value).map_err(|e| CommandError::new(seq, format!("invalid command: {e}")))?;
    if let GatewayCommand::Notify { modality, asset, text } = &command {
        if asset.is_empty() {
            return Err(CommandError::new(seq, "asset must not be empty"));
        }
        if *modality == Modality::Text && text.as_deref().is_none_or(str::is_empty) {
            return Err(CommandError::new(seq, "text notifications need text"));
        }
    }
    Ok(CommandFrame { seq, command })
}

/// Publishes are limited to actuator command topics and patient
/// notifications.
pub fn check_publish_topic(topic: &str, actuator_commands: &BTreeSet<String>) -> Result<(), String> {
    validate_topic_name(topic).map_err(|e| e.to_string())?;
    if actuator_commands.contains(topic) {
        return Ok(());
    }
    if let Some(rest) = topic.strip_prefix(NOTIFY_PREFIX) {
        if !rest.is_empty() {
            return Ok(());
        }
    }
    Err(format!("topic {topic:?} is not writable from the gateway"))
}

/// Returns the payload as text when it is UTF-8, base64 otherwise.
pub fn encode_payload(payload: &[u8]) -> (String, bool) {
    match std::str::from_utf8(payload) {
        Ok(s) => (s.to_owned(), false),
        Err(_) => (BASE64.encode(payload), true),
    }
}

pub(crate) fn decode_payload(payload: &str, binary: bool) -> Result<Vec<u8>, String> {
    if binary {
        BASE64
            .decode(payload)
            .map_err(|e| format!("payload is not valid base64: {e}"))
    } else {
        Ok(payload.as_bytes().to_vec())
    }
}
