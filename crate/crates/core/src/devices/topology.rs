//! Topology file format (TOML):
//!
//! ```toml
//! [[device]]
//! id = "temperature"
//! kind = "temperature"       # rain | flame | gas | temperature | pir | relay | led
//! location = "tvroom"        # bedroom | kitchen | tvroom | main_entrance | terrace
//! sample_period_ms = 60000   # sensors only, optional
//! initial = "21.0"           # optional, defaults per kind
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::kind::{DeviceKind, KindRegistry, Reading, ValueError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Bedroom,
    Kitchen,
    Tvroom,
    MainEntrance,
    Terrace,
}

impl Location {
    pub fn as_str(self) -> &'static str {
        match self {
            Location::Bedroom => "bedroom",
            Location::Kitchen => "kitchen",
            Location::Tvroom => "tvroom",
            Location::MainEntrance => "main_entrance",
            Location::Terrace => "terrace",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct DeviceSpec {
    pub id: String,
    pub kind: Arc<dyn DeviceKind>,
    pub location: Location,
    pub sample_period: Option<Duration>,
    pub initial: Reading,
}

impl DeviceSpec {
    pub fn topic(&self) -> String {
        format!("home/{}/{}", self.location, self.id)
    }

    pub fn command_topic(&self) -> Option<String> {
        self.kind
            .is_actuator()
            .then(|| format!("{}{}", self.topic(), super::COMMAND_SUFFIX))
    }
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("cannot read topology: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse topology: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duplicate device id {0:?}")]
    DuplicateId(String),
    #[error("device {id:?}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("device {id:?}: initial value: {source}")]
    Initial { id: String, source: ValueError },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    #[serde(default)]
    device: Vec<RawDevice>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    id: String,
    kind: String,
    location: Location,
    sample_period_ms: Option<u64>,
    initial: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub devices: Vec<DeviceSpec>,
}

impl Topology {
    pub fn load(path: &Path, registry: &KindRegistry) -> Result<Topology, TopologyError> {
        Self::parse(&std::fs::read_to_string(path)?, registry)
    }

    pub fn parse(text: &str, registry: &KindRegistry) -> Result<Topology, TopologyError> {
        let raw: RawTopology = toml::from_str(text)?;
        let mut seen = HashSet::new();
        let mut devices = Vec::with_capacity(raw.device.len());
        for d in raw.device {
            let invalid = |reason: String| TopologyError::Invalid {
                id: d.id.clone(),
                reason,
            };
            if d.id.is_empty() || d.id.contains(['/', '+', '#', '\0']) || d.id.contains(char::is_whitespace) {
                return Err(invalid("id must be a nonempty single topic level".into()));
            }
            if !seen.insert(d.id.clone()) {
                return Err(TopologyError::DuplicateId(d.id));
            }
            let kind = registry
                .get(&d.kind)
                .ok_or_else(|| invalid(format!("unknown kind {:?}", d.kind)))?;
            let sample_period = match d.sample_period_ms {
                None => None,
                Some(0) => return Err(invalid("sample_period_ms must be positive".into())),
                Some(_) if kind.is_actuator() => {
                    return Err(invalid("actuators do not sample".into()))
                }
                Some(ms) => Some(Duration::from_millis(ms)),
            };
            let initial = match &d.initial {
                Some(raw) => kind.parse(raw).map_err(|source| TopologyError::Initial {
                    id: d.id.clone(),
                    source,
                })?,
                None => kind.default_reading(),
            };
            devices.push(DeviceSpec {
                id: d.id,
                kind,
                location: d.location,
                sample_period,
                initial,
            });
        }
        Ok(Topology { devices })
    }

    pub fn default_topology() -> Topology {
        Self::parse(crate::DEFAULT_TOPOLOGY, &KindRegistry::builtin())
            .expect("shipped topology is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Topology, TopologyError> {
        Topology::parse(text, &KindRegistry::builtin())
    }

    #[test]
    fn default_has_eight_devices() {
        let t = Topology::default_topology();
        let summary: Vec<String> = t
            .devices
            .iter()
            .map(|d| format!("{}:{}@{}", d.id, d.kind.name(), d.location))
            .collect();
        assert_eq!(
            summary,
            [
                "rain:rain@terrace",
                "flame:flame@kitchen",
                "temperature:temperature@tvroom",
                "pir:pir@kitchen",
                "drawer_relay:relay@bedroom",
                "oven_relay:relay@kitchen",
                "heater_relay:relay@tvroom",
                "led:led@main_entrance",
            ]
        );
        assert_eq!(t.devices[4].topic(), "home/bedroom/drawer_relay");
        assert_eq!(
            t.devices[4].command_topic().as_deref(),
            Some("home/bedroom/drawer_relay/set")
        );
        assert_eq!(t.devices[0].command_topic(), None);
    }

    #[test]
    fn empty_is_fine() {
        assert!(parse("").unwrap().devices.is_empty());
    }

    #[test]
    fn rejects_bad_entries() {
        let dup = "[[device]]\nid='a'\nkind='pir'\nlocation='kitchen'\n[[device]]\nid='a'\nkind='rain'\nlocation='terrace'\n";
        assert!(matches!(parse(dup), Err(TopologyError::DuplicateId(id)) if id == "a"));
        let bad_kind = "[[device]]\nid='a'\nkind='toaster'\nlocation='kitchen'\n";
        assert!(matches!(parse(bad_kind), Err(TopologyError::Invalid { .. })));
        let wildcard = "[[device]]\nid='a/+'\nkind='pir'\nlocation='kitchen'\n";
        assert!(parse(wildcard).is_err());
        let bad_loc = "[[device]]\nid='a'\nkind='pir'\nlocation='garage'\n";
        assert!(matches!(parse(bad_loc), Err(TopologyError::Parse(_))));
        let hot = "[[device]]\nid='t'\nkind='temperature'\nlocation='tvroom'\ninitial='90'\n";
        assert!(matches!(parse(hot), Err(TopologyError::Initial { .. })));
        let sampling_relay =
            "[[device]]\nid='r'\nkind='relay'\nlocation='tvroom'\nsample_period_ms=10\n";
        assert!(parse(sampling_relay).is_err());
    }

    #[test]
    fn gas_alias_accepted() {
        let t = parse("[[device]]\nid='gas'\nkind='gas'\nlocation='kitchen'\n").unwrap();
        assert_eq!(t.devices[0].kind.name(), "flame");
    }
}
