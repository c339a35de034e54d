//! Runs a [`Fleet`] against a broker: one MQTT client per device.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use aal_mqtt::{Client, ClientConfig, ClientError, QoS};
use tokio::task::JoinHandle;
use tracing::{debug, warn};

use super::fleet::{Emission, Fleet, FleetError, StateChange};

const SAMPLE_TICK: Duration = Duration::from_millis(50);

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

pub struct FleetRunner;

impl FleetRunner {
    /// Connects every device as `<client_prefix><device_id>`, publishes
    /// retained initial states and starts the actuator listeners. `epoch`
    /// anchors the fleet's clock.
    pub async fn start(
        fleet: Fleet,
        broker: &str,
        client_prefix: &str,
        epoch: Instant,
    ) -> Result<FleetHandle, ClientError> {
        let fleet = Arc::new(Mutex::new(fleet));
        let specs: Vec<_> = fleet.lock().unwrap().specs().cloned().collect();
        let mut clients = BTreeMap::new();
        let mut tasks = Vec::new();
        let mut sampling = false;
        for spec in &specs {
            let config = ClientConfig::new(broker, format!("{client_prefix}{}", spec.id));
            let (client, mut inbound) = Client::connect(config).await?;
            if let Some(command_topic) = spec.command_topic() {
                client.subscribe(&[(&command_topic, QoS::AtLeastOnce)]).await?;
                let fleet = fleet.clone();
                let publisher = client.clone();
                tasks.push(tokio::spawn(async move {
                    while let Some(delivery) = inbound.recv().await {
                        let Some(payload) = delivery.payload_str() else {
                            warn!(topic = %delivery.topic, "non-UTF-8 command ignored");
                            continue;
                        };
                        let emission =
                            fleet
                                .lock()
                                .unwrap()
                                .apply_command(&delivery.topic, payload, epoch.elapsed());
                        if let Some(e) = emission {
                            publish(&publisher, &e).await;
                        }
                    }
                }));
            }
            sampling |= spec.sample_period.is_some();
            clients.insert(spec.id.clone(), client);
        }
        let initial = fleet.lock().unwrap().initial_emissions(epoch.elapsed());
        for e in &initial {
            clients[&e.device_id]
                .publish_wait(&e.topic, e.payload.clone(), QoS::AtLeastOnce, e.retain)
                .await?;
        }
        if sampling {
            let fleet = fleet.clone();
            let clients = clients.clone();
            tasks.push(tokio::spawn(async move {
                let mut tick = tokio::time::interval(SAMPLE_TICK);
                loop {
                    tick.tick().await;
                    let due = fleet.lock().unwrap().step(epoch.elapsed());
                    for e in due {
                        publish(&clients[&e.device_id], &e).await;
                    }
                }
            }));
        }
        Ok(FleetHandle {
            fleet,
            clients,
            tasks,
            epoch,
        })
    }
}

async fn publish(client: &Client, e: &Emission) {
    debug!(topic = %e.topic, payload = %e.payload, "device publish");
    let result = client
        .publish_wait(&e.topic, e.payload.clone(), QoS::AtLeastOnce, e.retain)
        .await;
    if let Err(err) = result {
        warn!(topic = %e.topic, error = %err, "device publish failed");
    }
}

pub struct FleetHandle {
    fleet: Arc<Mutex<Fleet>>,
    clients: BTreeMap<String, Client>,
    tasks: Vec<JoinHandle<()>>,
    epoch: Instant,
}

impl FleetHandle {
    /// Physical stimulus: the device publishes `value` on its topic.
    pub async fn inject(&self, device_id: &str, value: &str) -> Result<(), RunnerError> {
        let e = self
            .fleet
            .lock()
            .unwrap()
            .inject_event(device_id, value, self.epoch.elapsed())?;
        self.clients[&e.device_id]
            .publish_wait(&e.topic, e.payload, QoS::AtLeastOnce, e.retain)
            .await?;
        Ok(())
    }

    pub fn state_log(&self) -> Vec<StateChange> {
        self.fleet.lock().unwrap().state_log().to_vec()
    }

    pub fn with_fleet<R>(&self, f: impl FnOnce(&Fleet) -> R) -> R {
        f(&self.fleet.lock().unwrap())
    }

    pub async fn shutdown(self) {
        for task in &self.tasks {
            task.abort();
        }
        for client in self.clients.values() {
            let _ = client.disconnect().await;
        }
    }
}

impl Drop for FleetHandle {
    fn drop(&mut self) {
        for task in &self.tasks {
            task.abort();
        }
    }
}
