use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const NOTIFY_PREFIX: &str = "patient/notify/";
pub const CONFIRM_TOPIC: &str = "patient/confirm";
pub const QR_PREFIX: &str = "patient/qr/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
    Image3d,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
            Modality::Image3d => "image3d",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            "image3d" => Ok(Modality::Image3d),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

/// Payload published on `patient/notify/<notif_id>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub notif_id: u64,
    pub modality: Modality,
    pub asset_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Milliseconds on the publisher's clock.
    pub created_at: u64,
    /// Set when the patient is expected to confirm; names the rule awaiting it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirm_rule: Option<String>,
}

impl Notification {
    pub fn topic(&self) -> String {
        format!("{NOTIFY_PREFIX}{}", self.notif_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("notification serializes")
    }

    /// Parses and checks the text-modality invariant.
    pub fn from_json(raw: &[u8]) -> Result<Notification, String> {
        let n: Notification = serde_json::from_slice(raw).map_err(|e| e.to_string())?;
        if n.modality == Modality::Text && n.text.as_deref().is_none_or(str::is_empty) {
            return Err("text notification without text".into());
        }
        Ok(n)
    }
}

/// Body of a `patient/confirm` message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confirmation {
    pub rule_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notif_id: Option<u64>,
}

/// Simulated time the patient device spends presenting each modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderCosts {
    pub audio: Duration,
    pub image: Duration,
}

impl RenderCosts {
    pub const ZERO: RenderCosts = RenderCosts {
        audio: Duration::ZERO,
        image: Duration::ZERO,
    };

    pub fn cost(&self, modality: Modality) -> Duration {
        match modality {
            Modality::Audio => self.audio,
            Modality::Image3d => self.image,
            Modality::Text => Duration::ZERO,
        }
    }
}

impl Default for RenderCosts {
    fn default() -> Self {
        RenderCosts {
            audio: Duration::from_millis(364),
            image: Duration::from_millis(106),
        }
    }
}
