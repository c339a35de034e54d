use std::io::{Read, Write};

use super::{LatencySample, TrialKind};

pub const CSV_HEADER: &str = "trial,kind,t_publish_ns,t_render_ns,latency_ms";

/// One row per sample; lost trials have empty `t_render_ns` and
/// `latency_ms`. Floats are written in shortest round-trip form.
pub fn export_csv(samples: &[LatencySample], out: impl Write) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for s in samples {
        w.write_record([
            s.trial.to_string(),
            s.kind.to_string(),
            s.t_publish_ns.to_string(),
            s.t_render_ns.map(|t| t.to_string()).unwrap_or_default(),
            s.latency_ms().map(|l| l.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Latency column of an exported file; `None` for lost trials.
pub fn read_csv_latencies(input: impl Read) -> csv::Result<Vec<(u32, TrialKind, Option<f64>)>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let bad = |what: &str| {
            csv::Error::from(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("bad {what} in row {:?}", record),
            ))
        };
        let trial = field(0).parse().map_err(|_| bad("trial"))?;
        let kind = field(1).parse().map_err(|_| bad("kind"))?;
        let latency = match field(4) {
            "" => None,
            v => Some(v.parse().map_err(|_| bad("latency_ms"))?),
        };
        out.push((trial, kind, latency));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_layout() {
        let samples = [
            LatencySample {
                trial: 1,
                kind: TrialKind::Audio,
                t_publish_ns: 1_000,
                t_render_ns: Some(365_001_000),
            },
            LatencySample {
                trial: 2,
                kind: TrialKind::Audio,
                t_publish_ns: 2_000,
                t_render_ns: None,
            },
        ];
        let mut buf = Vec::new();
        export_csv(&samples, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "trial,kind,t_publish_ns,t_render_ns,latency_ms\n1,audio,1000,365001000,365\n2,audio,2000,,\n"
        );
        let back = read_csv_latencies(&buf[..]).unwrap();
        assert_eq!(back, [(1, TrialKind::Audio, Some(365.0)), (2, TrialKind::Audio, None)]);
    }
}
