use std::collections::HashSet;
use std::fmt;
use std::hash::Hash;

use serde::Serialize;

use super::{LatencySample, TrialKind, REFERENCE_AUDIO_MS, REFERENCE_IMAGE_MS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub kind: TrialKind,
    pub n: usize,
    pub received: usize,
    pub mean_ms: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for one sample.
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub loss_count: usize,
}

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `ceil(p/100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of nothing");
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl TrialReport {
    /// Statistics over received samples. With no received samples the
    /// latency fields are NaN.
    pub fn from_samples(kind: TrialKind, samples: &[LatencySample]) -> TrialReport {
        let mut latencies: Vec<f64> = samples.iter().filter_map(LatencySample::latency_ms).collect();
        let received = latencies.len();
        let loss_count = samples.len() - received;
        if latencies.is_empty() {
            return TrialReport {
                kind,
                n: samples.len(),
                received,
                mean_ms: f64::NAN,
                std_ms: f64::NAN,
                min_ms: f64::NAN,
                max_ms: f64::NAN,
                p50_ms: f64::NAN,
                p95_ms: f64::NAN,
                loss_count,
            };
        }
        let mean = latencies.iter().sum::<f64>() / received as f64;
        let std = if received > 1 {
            (latencies.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (received - 1) as f64).sqrt()
        } else {
            0.0
        };
        latencies.sort_by(f64::total_cmp);
        TrialReport {
            kind,
            n: samples.len(),
            received,
            mean_ms: mean,
            std_ms: std,
            min_ms: latencies[0],
            max_ms: latencies[received - 1],
            p50_ms: nearest_rank(&latencies, 50.0),
            p95_ms: nearest_rank(&latencies, 95.0),
            loss_count,
        }
    }
}

impl fmt::Display for TrialReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} trials: n={} received={} lost={}", self.kind, self.n, self.received, self.loss_count)?;
        writeln!(f, "  mean  {:>10.3} ms", self.mean_ms)?;
        writeln!(f, "  std   {:>10.3} ms", self.std_ms)?;
        writeln!(f, "  min   {:>10.3} ms", self.min_ms)?;
        writeln!(f, "  p50   {:>10.3} ms", self.p50_ms)?;
        writeln!(f, "  p95   {:>10.3} ms", self.p95_ms)?;
        writeln!(f, "  max   {:>10.3} ms", self.max_ms)?;
        write!(
            f,
            "reference device means (not comparable): audio {REFERENCE_AUDIO_MS} ms, image {REFERENCE_IMAGE_MS} ms"
        )
    }
}

/// Number of sent keys with no matching received key.
pub fn loss_audit<K: Eq + Hash>(
    sent: impl IntoIterator<Item = K>,
    received: impl IntoIterator<Item = K>,
) -> usize {
    let received: HashSet<K> = received.into_iter().collect();
    sent.into_iter().filter(|k| !received.contains(k)).count()
}
