use std::collections::HashMap;
use std::time::Duration;

use thiserror::Error;
use tracing::warn;

use super::kind::{Reading, ValueError};
use super::topology::{DeviceSpec, Topology};
use super::COMMAND_SUFFIX;

/// A publish a device wants to make.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub device_id: String,
    pub topic: String,
    pub payload: String,
    pub retain: bool,
    pub sim_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateChange {
    pub sim_time: Duration,
    pub device_id: String,
    pub old: Reading,
    pub new: Reading,
    pub no_op: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum FleetError {
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("device {device_id:?}: {source}")]
    Value {
        device_id: String,
        source: ValueError,
    },
}

#[derive(Debug)]
struct Device {
    spec: DeviceSpec,
    topic: String,
    state: Reading,
    next_sample: Option<Duration>,
}

/// Sans-IO fleet: turns stimuli and commands into publishes.
#[derive(Debug, Default)]
pub struct Fleet {
    devices: Vec<Device>,
    by_id: HashMap<String, usize>,
    by_topic: HashMap<String, usize>,
    log: Vec<StateChange>,
}

impl Fleet {
    pub fn new(topology: Topology) -> Fleet {
        let mut fleet = Fleet::default();
        for spec in topology.devices {
            let topic = spec.topic();
            let idx = fleet.devices.len();
            fleet.by_id.insert(spec.id.clone(), idx);
            fleet.by_topic.insert(topic.clone(), idx);
            fleet.devices.push(Device {
                next_sample: spec.sample_period,
                state: spec.initial,
                topic,
                spec,
            });
        }
        fleet
    }

    pub fn specs(&self) -> impl Iterator<Item = &DeviceSpec> {
        self.devices.iter().map(|d| &d.spec)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn state(&self, device_id: &str) -> Option<Reading> {
        self.by_id.get(device_id).map(|&i| self.devices[i].state)
    }

    pub fn state_log(&self) -> &[StateChange] {
        &self.log
    }

    /// Resolves a state topic to its device.
    pub fn device_for_topic(&self, topic: &str) -> Option<&DeviceSpec> {
        self.by_topic.get(topic).map(|&i| &self.devices[i].spec)
    }

    /// Resolves a command topic to the actuator it addresses.
    pub fn actuator_for_command(&self, topic: &str) -> Option<&DeviceSpec> {
        let state_topic = topic.strip_suffix(COMMAND_SUFFIX)?;
        self.device_for_topic(state_topic)
            .filter(|spec| spec.kind.is_actuator())
    }

    /// Retained publish of every device's current state, in topology order.
    pub fn initial_emissions(&self, sim_time: Duration) -> Vec<Emission> {
        self.devices
            .iter()
            .map(|d| emission(d, sim_time))
            .collect()
    }

    /// A physical stimulus: the device observes `raw` and publishes it.
    pub fn inject_event(
        &mut self,
        device_id: &str,
        raw: &str,
        sim_time: Duration,
    ) -> Result<Emission, FleetError> {
        let idx = *self
            .by_id
            .get(device_id)
            .ok_or_else(|| FleetError::UnknownDevice(device_id.to_owned()))?;
        let device = &mut self.devices[idx];
        let value = device.spec.kind.parse(raw).map_err(|source| FleetError::Value {
            device_id: device_id.to_owned(),
            source,
        })?;
        device.state = value;
        Ok(emission(device, sim_time))
    }

    /// Applies a message received on an actuator's command topic. Returns
    /// the confirmed-state publish, or `None` when the topic or payload is
    /// not a valid command.
    pub fn apply_command(
        &mut self,
        topic: &str,
        payload: &str,
        sim_time: Duration,
    ) -> Option<Emission> {
        let idx = *topic
            .strip_suffix(COMMAND_SUFFIX)
            .and_then(|t| self.by_topic.get(t))?;
        let device = &mut self.devices[idx];
        if !device.spec.kind.is_actuator() {
            warn!(topic, "command for a sensor ignored");
            return None;
        }
        let new = match device.spec.kind.parse(payload) {
            Ok(v) => v,
            Err(e) => {
                warn!(topic, payload, error = %e, "malformed command ignored");
                return None;
            }
        };
        let old = std::mem::replace(&mut device.state, new);
        self.log.push(StateChange {
            sim_time,
            device_id: device.spec.id.clone(),
            old,
            new,
            no_op: old == new,
        });
        Some(emission(device, sim_time))
    }

    /// Periodic samples due at or before `sim_time`, ordered by due time
    /// and then topology order.
    pub fn step(&mut self, sim_time: Duration) -> Vec<Emission> {
        let mut due = Vec::new();
        for (idx, device) in self.devices.iter_mut().enumerate() {
            let Some(period) = device.spec.sample_period else {
                continue;
            };
            while let Some(next) = device.next_sample.filter(|t| *t <= sim_time) {
                due.push((next, idx));
                device.next_sample = Some(next + period);
            }
        }
        due.sort();
        due.into_iter()
            .map(|(t, idx)| emission(&self.devices[idx], t))
            .collect()
    }
}

fn emission(device: &Device, sim_time: Duration) -> Emission {
    Emission {
        device_id: device.spec.id.clone(),
        topic: device.topic.clone(),
        payload: device.state.encode(),
        retain: true,
        sim_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::KindRegistry;

    fn fleet() -> Fleet {
        Fleet::new(Topology::default_topology())
    }

    fn ms(n: u64) -> Duration {
        Duration::from_millis(n)
    }

    #[test]
    fn initial_emissions_are_retained() {
        let f = fleet();
        let e = f.initial_emissions(Duration::ZERO);
        assert_eq!(e.len(), 8);
        assert!(e.iter().all(|e| e.retain));
        let oven = e.iter().find(|e| e.device_id == "oven_relay").unwrap();
        assert_eq!(oven.payload, "1");
        let temp = e.iter().find(|e| e.device_id == "temperature").unwrap();
        assert_eq!(temp.payload, "21.0");
    }

    #[test]
    fn inject_publishes_on_device_topic() {
        let mut f = fleet();
        let e = f.inject_event("flame", "1", ms(5)).unwrap();
        assert_eq!((e.topic.as_str(), e.payload.as_str()), ("home/kitchen/flame", "1"));
        let e = f.inject_event("temperature", "15", ms(6)).unwrap();
        assert_eq!(e.payload, "15.0");
        assert!(e.retain);
        assert!(matches!(f.inject_event("nope", "1", ms(7)), Err(FleetError::UnknownDevice(_))));
        assert!(matches!(f.inject_event("pir", "2", ms(7)), Err(FleetError::Value { .. })));
    }

    #[test]
    fn commands_confirm_state_and_log() {
        let mut f = fleet();
        let e = f
            .apply_command("home/bedroom/drawer_relay/set", "1", ms(10))
            .unwrap();
        assert_eq!((e.topic.as_str(), e.payload.as_str()), ("home/bedroom/drawer_relay", "1"));
        assert!(e.retain);
        let again = f
            .apply_command("home/bedroom/drawer_relay/set", "1", ms(20))
            .unwrap();
        assert_eq!(again.payload, "1");
        let log = f.state_log();
        assert_eq!(log.len(), 2);
        assert!(!log[0].no_op);
        assert_eq!((log[0].old, log[0].new), (Reading::Bool(false), Reading::Bool(true)));
        assert!(log[1].no_op);

        assert!(f.apply_command("home/bedroom/drawer_relay/set", "x", ms(30)).is_none());
        assert!(f.apply_command("home/kitchen/flame/set", "1", ms(30)).is_none());
        assert!(f.apply_command("home/bedroom/drawer_relay", "1", ms(30)).is_none());
        assert_eq!(f.state_log().len(), 2);
        assert_eq!(f.state("drawer_relay"), Some(Reading::Bool(true)));
    }

    #[test]
    fn step_emits_due_samples_in_order() {
        let topo = Topology::parse(
            "[[device]]\nid='t'\nkind='temperature'\nlocation='tvroom'\nsample_period_ms=300\n\
             [[device]]\nid='p'\nkind='pir'\nlocation='kitchen'\nsample_period_ms=200\n",
            &KindRegistry::builtin(),
        )
        .unwrap();
        let mut f = Fleet::new(topo);
        assert!(f.step(ms(199)).is_empty());
        let trace: Vec<(u128, String)> = f
            .step(ms(600))
            .into_iter()
            .map(|e| (e.sim_time.as_millis(), e.device_id))
            .collect();
        assert_eq!(
            trace,
            [
                (200, "p".into()),
                (300, "t".into()),
                (400, "p".into()),
                (600, "t".into()),
                (600, "p".into()),
            ]
        );
        assert!(f.step(ms(600)).is_empty());
    }
}
