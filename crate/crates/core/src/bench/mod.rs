//! End-to-end response-time trials: publish a triggering event, let the
//! rule engine notify the patient agent, and time until render completes.

mod export;
mod stats;
mod trial;

pub use export::{export_csv, read_csv_latencies, CSV_HEADER};
pub use stats::{loss_audit, nearest_rank, TrialReport};
pub use trial::{run_trials, BenchConfig, BenchOutcome, BrokerTarget};

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::Modality;

/// Reference figures measured on the original phone hardware; reported
/// alongside results, never asserted against.
pub const REFERENCE_AUDIO_MS: f64 = 364.0;
pub const REFERENCE_IMAGE_MS: f64 = 106.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKind {
    Audio,
    Image,
}

impl TrialKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialKind::Audio => "audio",
            TrialKind::Image => "image",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            TrialKind::Audio => Modality::Audio,
            TrialKind::Image => Modality::Image3d,
        }
    }
}

impl fmt::Display for TrialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "audio" => Ok(TrialKind::Audio),
            "image" => Ok(TrialKind::Image),
            other => Err(format!("unknown trial kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LatencySample {
    pub trial: u32,
    pub kind: TrialKind,
    pub t_publish_ns: u64,
    /// `None` when the trial timed out.
    pub t_render_ns: Option<u64>,
}

impl LatencySample {
    pub fn latency_ms(&self) -> Option<f64> {
        self.t_render_ns
            .map(|r| r.saturating_sub(self.t_publish_ns) as f64 / 1e6)
    }
}
