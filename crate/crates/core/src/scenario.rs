//! Whole-system run in virtual time: devices, rule engine, patient agent
//! and a caregiver client all talk through a [`VirtualNetwork`] broker,
//! driven by an event script. The resulting trace is byte-stable.

use std::collections::BTreeMap;
use std::time::Duration;

use aal_mqtt::broker::{BrokerConfig, ConnId};
use aal_mqtt::virtual_net::VirtualError;
use aal_mqtt::{QoS, VirtualNetwork};
use thiserror::Error;

use crate::devices::{Emission, Fleet, FleetError, StateChange, Topology};
use crate::notification::NOTIFY_PREFIX;
use crate::patient::{PatientAgent, RenderLogEntry, ScanOutcome};
use crate::rules::{Emitted, RuleEngine, RuleSet, ENGINE_SUBSCRIPTIONS};
use crate::script::{ScriptAction, ScriptEvent};
use crate::RenderCosts;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Network(#[from] VirtualError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error("device {0:?} has no command topic")]
    NotAnActuator(String),
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub trace: Vec<String>,
    pub emitted: Vec<(Duration, Emitted)>,
    pub render_log: Vec<RenderLogEntry>,
    pub state_log: Vec<StateChange>,
}

impl ScenarioOutcome {
    /// Trace as text, one line per entry.
    pub fn trace_text(&self) -> String {
        let mut s = self.trace.join("\n");
        s.push('\n');
        s
    }
}

struct World {
    net: VirtualNetwork,
    fleet: Fleet,
    engine: RuleEngine,
    agent: PatientAgent,
    devices: BTreeMap<String, ConnId>,
    device_order: Vec<String>,
    engine_conn: ConnId,
    patient_conn: ConnId,
    dashboard_conn: ConnId,
    out: ScenarioOutcome,
}

fn stamp(t: Duration) -> String {
    format!("[{:>9.3}s]", t.as_secs_f64())
}

impl World {
    fn note(&mut self, actor: &str, what: impl AsRef<str>) {
        let line = format!("{} {actor}: {}", stamp(self.net.now()), what.as_ref());
        self.out.trace.push(line);
    }

    fn publish_device(&mut self, e: &Emission) -> Result<(), ScenarioError> {
        let conn = self.devices[&e.device_id];
        self.net
            .publish(conn, &e.topic, e.payload.clone(), QoS::AtLeastOnce, e.retain)?;
        let retained = if e.retain { " retained" } else { "" };
        self.note(
            &format!("dev-{}", e.device_id),
            format!("pub {} {:?}{retained}", e.topic, e.payload),
        );
        Ok(())
    }

    /// Delivers messages until every queue is empty.
    fn settle(&mut self) -> Result<(), ScenarioError> {
        loop {
            let mut progress = false;
            for id in self.device_order.clone() {
                let conn = self.devices[&id];
                for d in self.net.receive(conn) {
                    progress = true;
                    let payload = String::from_utf8_lossy(&d.payload).into_owned();
                    let now = self.net.now();
                    match self.fleet.apply_command(&d.topic, &payload, now) {
                        Some(e) => self.publish_device(&e)?,
                        None => self.note(&format!("dev-{id}"), format!("ignored command {payload:?}")),
                    }
                }
            }
            for d in self.net.receive(self.engine_conn) {
                progress = true;
                if d.retain {
                    continue;
                }
                let now = self.net.now();
                for emitted in self.engine.handle_message(&d.topic, &d.payload, now) {
                    let (topic, payload) = emitted.to_publish();
                    self.net
                        .publish(self.engine_conn, &topic, payload, QoS::AtLeastOnce, false)?;
                    self.note("engine", emitted.to_string());
                    self.out.emitted.push((now, emitted));
                }
            }
            let batch = self.net.receive(self.patient_conn);
            if !batch.is_empty() {
                progress = true;
                let now = self.net.now();
                let entries = self
                    .agent
                    .on_notifications(batch.iter().map(|d| (&d.payload[..], now)));
                for e in entries {
                    self.note(
                        "patient",
                        format!(
                            "render #{} {} {} until {:.3}s",
                            e.notif_id,
                            e.modality,
                            e.asset_ref,
                            e.render_complete_time().as_secs_f64()
                        ),
                    );
                    self.out.render_log.push(e);
                }
            }
            if !progress {
                return Ok(());
            }
        }
    }

    fn apply(&mut self, event: &ScriptEvent) -> Result<(), ScenarioError> {
        self.net.advance_to(event.at);
        let now = self.net.now();
        for rule in self.engine.expire_pending(now) {
            self.note("engine", format!("{rule} confirmation expired"));
        }
        match &event.action {
            ScriptAction::Device { device_id, value } => {
                let e = self.fleet.inject_event(device_id, value, now)?;
                self.publish_device(&e)?;
            }
            ScriptAction::Command { device_id, value } => {
                let topic = self
                    .fleet
                    .specs()
                    .find(|s| &s.id == device_id)
                    .ok_or_else(|| FleetError::UnknownDevice(device_id.clone()))?
                    .command_topic()
                    .ok_or_else(|| ScenarioError::NotAnActuator(device_id.clone()))?;
                self.net
                    .publish(self.dashboard_conn, &topic, value.clone(), QoS::AtLeastOnce, false)?;
                self.note("dashboard", format!("pub {topic} {value:?}"));
            }
            ScriptAction::Scan { tag_id, latency } => {
                match self.agent.scan_qr(tag_id, now, *latency) {
                    Ok(ScanOutcome::Detected { topic, at }) => {
                        self.net.advance_to(at);
                        self.net
                            .publish(self.patient_conn, &topic, "detected", QoS::AtLeastOnce, false)?;
                        self.note("patient", format!("scan {tag_id} detected, pub {topic} \"detected\""));
                    }
                    Ok(ScanOutcome::Timeout { at }) => {
                        self.net.advance_to(at);
                        self.note("patient", format!("scan {tag_id} timed out"));
                    }
                    Err(e) => self.note("patient", format!("scan {tag_id} rejected: {e}")),
                }
            }
            ScriptAction::Confirm { notif_id } => {
                let target = notif_id.or_else(|| self.agent.latest_confirmable());
                match target.map(|id| (id, self.agent.confirm(id))) {
                    Some((id, Ok((topic, body)))) => {
                        self.net
                            .publish(self.patient_conn, &topic, body, QoS::AtLeastOnce, false)?;
                        self.note("patient", format!("confirm #{id}"));
                    }
                    Some((id, Err(e))) => self.note("patient", format!("confirm #{id} refused: {e}")),
                    None => self.note("patient", "nothing to confirm"),
                }
            }
        }
        self.settle()
    }
}

/// Runs `script` against a fresh system and returns the full trace.
pub fn run_scenario(
    topology: Topology,
    rules: RuleSet,
    costs: RenderCosts,
    script: &[ScriptEvent],
) -> Result<ScenarioOutcome, ScenarioError> {
    let mut net = VirtualNetwork::new(BrokerConfig::default());
    let (engine_conn, _) = net.connect("rule-engine", true, 0)?;
    let filters: Vec<(&str, QoS)> = ENGINE_SUBSCRIPTIONS.iter().map(|f| (*f, QoS::AtLeastOnce)).collect();
    net.subscribe(engine_conn, &filters)?;
    let (patient_conn, _) = net.connect("patient", false, 0)?;
    net.subscribe(patient_conn, &[(&format!("{NOTIFY_PREFIX}#"), QoS::AtLeastOnce)])?;
    let (dashboard_conn, _) = net.connect("dashboard", true, 0)?;

    let fleet = Fleet::new(topology);
    let mut devices = BTreeMap::new();
    let mut device_order = Vec::new();
    for spec in fleet.specs() {
        let (conn, _) = net.connect(&format!("dev-{}", spec.id), true, 0)?;
        if let Some(t) = spec.command_topic() {
            net.subscribe(conn, &[(&t, QoS::AtLeastOnce)])?;
        }
        devices.insert(spec.id.clone(), conn);
        device_order.push(spec.id.clone());
    }
    let mut world = World {
        net,
        fleet,
        engine: RuleEngine::new(rules),
        agent: PatientAgent::new(costs),
        devices,
        device_order,
        engine_conn,
        patient_conn,
        dashboard_conn,
        out: ScenarioOutcome {
            trace: Vec::new(),
            emitted: Vec::new(),
            render_log: Vec::new(),
            state_log: Vec::new(),
        },
    };
    for e in world.fleet.initial_emissions(Duration::ZERO) {
        world.publish_device(&e)?;
    }
    world.settle()?;
    for event in script {
        world.apply(event)?;
    }
    world.out.state_log = world.fleet.state_log().to_vec();
    Ok(world.out)
}

/// Default script: every scenario with the heater prompt confirmed in time.
pub const DEFAULT_SCRIPT: &str = include_str!("../config/scenario.script");
/// Same as the default, but the heater prompt is confirmed 61 s late.
pub const LATE_CONFIRM_SCRIPT: &str = include_str!("../config/scenario_late_confirm.script");
