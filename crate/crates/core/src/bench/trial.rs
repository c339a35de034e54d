use std::collections::HashMap;
use std::time::{Duration, Instant};

use aal_mqtt::{BrokerServer, Client, ClientConfig, ClientError, QoS, ServerConfig};
use tokio::sync::broadcast::error::RecvError;
use tracing::warn;

use super::stats::{loss_audit, TrialReport};
use super::{LatencySample, TrialKind};
use crate::devices::{Fleet, FleetHandle, FleetRunner, Topology};
use crate::patient::{AgentHandle, AgentRunner, PatientAgent};
use crate::rules::{EngineHandle, EngineRunner, RuleEngine, RuleSet};
use crate::{Modality, RenderCosts};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerTarget {
    /// Start a broker on a loopback port for the duration of the run.
    InProcess,
    Remote(String),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub kind: TrialKind,
    pub n: u32,
    pub broker: BrokerTarget,
    pub render_costs: RenderCosts,
    /// A trial with no render by then is a loss.
    pub timeout: Duration,
}

impl BenchConfig {
    pub fn new(kind: TrialKind, n: u32) -> Self {
        BenchConfig {
            kind,
            n,
            broker: BrokerTarget::InProcess,
            render_costs: RenderCosts::default(),
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub samples: Vec<LatencySample>,
    pub report: TrialReport,
    /// Sent triggers with no matching render, from the sent/received logs.
    pub audited_loss: usize,
}

/// What one trial publishes and which renders it produces.
struct Path {
    trigger_topic: &'static str,
    trigger_payload: &'static str,
    reset: Option<(&'static str, &'static str)>,
    measured: (Modality, &'static str),
    all_assets: &'static [&'static str],
}

fn path(kind: TrialKind) -> Path {
    match kind {
        // Opening the medication drawer leads to the pills image and the
        // spoken reminder; the reminder is timed.
        TrialKind::Audio => Path {
            trigger_topic: "home/bedroom/drawer_relay/set",
            trigger_payload: "1",
            reset: Some(("home/bedroom/drawer_relay/set", "0")),
            measured: (Modality::Audio, "medication_time"),
            all_assets: &["pills", "medication_time"],
        },
        // A detected door tag leads to the family photo, which is timed,
        // followed by spoken details.
        TrialKind::Image => Path {
            trigger_topic: "patient/qr/bedroom_door",
            trigger_payload: "detected",
            reset: None,
            measured: (Modality::Image3d, "family_photo"),
            all_assets: &["family_photo", "family_info"],
        },
    }
}

struct Rig {
    _server: Option<BrokerServer>,
    fleet: FleetHandle,
    engine: EngineHandle,
    agent: AgentHandle,
    trigger: Client,
}

async fn rig(config: &BenchConfig, epoch: Instant) -> Result<Rig, ClientError> {
    let (server, addr) = match &config.broker {
        BrokerTarget::InProcess => {
            let server = BrokerServer::start(ServerConfig::new(([127, 0, 0, 1], 0).into())).await?;
            let addr = server.local_addr().to_string();
            (Some(server), addr)
        }
        BrokerTarget::Remote(addr) => (None, addr.clone()),
    };
    let fleet = FleetRunner::start(
        Fleet::new(Topology::default_topology()),
        &addr,
        "bench-dev-",
        epoch,
    )
    .await?;
    let engine = EngineRunner::start(
        RuleEngine::new(RuleSet::default_rules()),
        &addr,
        "bench-engine",
        epoch,
    )
    .await?;
    let agent = AgentRunner::start(
        PatientAgent::new(config.render_costs),
        ClientConfig::new(&addr, "bench-patient"),
        epoch,
    )
    .await?;
    let (trigger, _) = Client::connect(ClientConfig::new(&addr, "bench-trigger")).await?;
    Ok(Rig {
        _server: server,
        fleet,
        engine,
        agent,
        trigger,
    })
}

/// Runs `n` serial trials. Connection failures count every trial as lost
/// rather than failing the run.
pub async fn run_trials(config: &BenchConfig) -> BenchOutcome {
    let epoch = Instant::now();
    let p = path(config.kind);
    let mut samples = Vec::with_capacity(config.n as usize);
    let rig = match rig(config, epoch).await {
        Ok(rig) => Some(rig),
        Err(e) => {
            warn!(error = %e, "bench setup failed; every trial is lost");
            None
        }
    };

    for trial in 1..=config.n {
        let Some(rig) = &rig else {
            samples.push(LatencySample {
                trial,
                kind: config.kind,
                t_publish_ns: epoch.elapsed().as_nanos() as u64,
                t_render_ns: None,
            });
            continue;
        };
        let mut renders = rig.agent.renders();
        let t_publish = epoch.elapsed();
        let sent = rig
            .trigger
            .publish_wait(p.trigger_topic, p.trigger_payload, QoS::AtLeastOnce, false)
            .await;
        let mut done: HashMap<&str, Duration> = HashMap::new();
        let mut measured = None;
        if let Err(e) = sent {
            warn!(trial, error = %e, "trigger not delivered");
        } else {
            let deadline = tokio::time::Instant::now() + config.timeout;
            while done.len() < p.all_assets.len() {
                let entry = match tokio::time::timeout_at(deadline, renders.recv()).await {
                    Ok(Ok(entry)) => entry,
                    Ok(Err(RecvError::Lagged(_))) => continue,
                    Ok(Err(RecvError::Closed)) | Err(_) => break,
                };
                if entry.receive_time() < t_publish {
                    continue;
                }
                if let Some(asset) = p.all_assets.iter().find(|a| **a == entry.asset_ref) {
                    done.insert(asset, entry.render_complete_time());
                }
                if (entry.modality, entry.asset_ref.as_str()) == p.measured {
                    measured.get_or_insert(entry.render_complete_ns);
                }
            }
        }
        samples.push(LatencySample {
            trial,
            kind: config.kind,
            t_publish_ns: t_publish.as_nanos() as u64,
            t_render_ns: measured,
        });
        // Let the simulated renderer go idle so trials stay independent.
        if let Some(idle_at) = done.values().max() {
            tokio::time::sleep(idle_at.saturating_sub(epoch.elapsed())).await;
        }
        if let Some((topic, payload)) = p.reset {
            let _ = rig.trigger.publish_wait(topic, payload, QoS::AtLeastOnce, false).await;
        }
    }

    if let Some(rig) = rig {
        rig.agent.shutdown().await;
        rig.engine.shutdown().await;
        rig.fleet.shutdown().await;
        let _ = rig.trigger.disconnect().await;
    }
    let sent = samples.iter().map(|s| s.trial);
    let received = samples.iter().filter(|s| s.t_render_ns.is_some()).map(|s| s.trial);
    let audited_loss = loss_audit(sent, received);
    BenchOutcome {
        report: TrialReport::from_samples(config.kind, &samples),
        samples,
        audited_loss,
    }
}
