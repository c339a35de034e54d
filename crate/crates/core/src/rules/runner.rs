//! Connects a [`RuleEngine`] to a broker as an ordinary client.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use aal_mqtt::{Client, ClientConfig, ClientError, QoS};
use tokio::task::JoinHandle;
use tracing::{debug, warn};

use super::engine::{Emitted, RuleEngine};

pub const ENGINE_SUBSCRIPTIONS: [&str; 3] = ["home/#", "patient/qr/#", "patient/confirm"];
const EXPIRY_TICK: Duration = Duration::from_secs(1);

pub struct EngineRunner;

impl EngineRunner {
    /// Messages are processed one at a time in arrival order. Retained
    /// replays are stored state rather than fresh events and are skipped.
    pub async fn start(
        engine: RuleEngine,
        broker: &str,
        client_id: &str,
        epoch: Instant,
    ) -> Result<EngineHandle, ClientError> {
        let (client, mut inbound) = Client::connect(ClientConfig::new(broker, client_id)).await?;
        let filters: Vec<(&str, QoS)> = ENGINE_SUBSCRIPTIONS
            .iter()
            .map(|f| (*f, QoS::AtLeastOnce))
            .collect();
        client.subscribe(&filters).await?;

        let log = Arc::new(Mutex::new(Vec::new()));
        let task_log = log.clone();
        let publisher = client.clone();
        let task = tokio::spawn(async move {
            let mut engine = engine;
            let mut expiry = tokio::time::interval(EXPIRY_TICK);
            loop {
                let out = tokio::select! {
                    delivery = inbound.recv() => {
                        let Some(d) = delivery else { break };
                        if d.retain {
                            continue;
                        }
                        engine.handle_message(&d.topic, &d.payload, epoch.elapsed())
                    }
                    _ = expiry.tick() => {
                        for rule in engine.expire_pending(epoch.elapsed()) {
                            debug!(rule, "confirmation expired");
                        }
                        continue;
                    }
                };
                for emitted in out {
                    let (topic, payload) = emitted.to_publish();
                    debug!(%emitted, "rule fired");
                    if let Err(e) = publisher.publish_wait(&topic, payload, QoS::AtLeastOnce, false).await {
                        warn!(%topic, error = %e, "rule output not delivered");
                    }
                    task_log.lock().unwrap().push((epoch.elapsed(), emitted));
                }
            }
        });
        Ok(EngineHandle { client, task, log })
    }
}

pub struct EngineHandle {
    client: Client,
    task: JoinHandle<()>,
    log: Arc<Mutex<Vec<(Duration, Emitted)>>>,
}

impl EngineHandle {
    /// Everything published so far, with the time it was published.
    pub fn emitted(&self) -> Vec<(Duration, Emitted)> {
        self.log.lock().unwrap().clone()
    }

    pub fn is_connected(&self) -> bool {
        self.client.is_connected()
    }

    pub async fn shutdown(self) {
        self.task.abort();
        let _ = self.client.disconnect().await;
    }
}

impl Drop for EngineHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}
