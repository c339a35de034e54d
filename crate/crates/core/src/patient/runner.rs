//! Runs a [`PatientAgent`] against a broker over one client connection.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use aal_mqtt::{Client, ClientConfig, ClientError, QoS};
use tokio::sync::broadcast;
use tokio::task::JoinHandle;

use super::agent::{AgentError, PatientAgent, RenderLogEntry, ScanError, ScanOutcome};
use crate::notification::NOTIFY_PREFIX;

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

pub struct AgentRunner;

impl AgentRunner {
    pub async fn start(
        agent: PatientAgent,
        config: ClientConfig,
        epoch: Instant,
    ) -> Result<AgentHandle, ClientError> {
        let (client, mut inbound) = Client::connect(config).await?;
        if !client.session_present() {
            client
                .subscribe(&[(&format!("{NOTIFY_PREFIX}#"), QoS::AtLeastOnce)])
                .await?;
        }
        let agent = Arc::new(Mutex::new(agent));
        let (renders, _) = broadcast::channel(1024);
        let task = {
            let agent = agent.clone();
            let renders = renders.clone();
            tokio::spawn(async move {
                while let Some(first) = inbound.recv().await {
                    let now = epoch.elapsed();
                    let mut batch = vec![first];
                    while let Some(more) = inbound.try_recv() {
                        batch.push(more);
                    }
                    let entries = agent
                        .lock()
                        .unwrap()
                        .on_notifications(batch.iter().map(|d| (&d.payload[..], now)));
                    for entry in entries {
                        let _ = renders.send(entry);
                    }
                }
            })
        };
        Ok(AgentHandle {
            client,
            agent,
            renders,
            task,
            epoch,
        })
    }
}

pub struct AgentHandle {
    client: Client,
    agent: Arc<Mutex<PatientAgent>>,
    renders: broadcast::Sender<RenderLogEntry>,
    task: JoinHandle<()>,
    epoch: Instant,
}

impl AgentHandle {
    /// Stream of render-log entries as they are produced.
    pub fn renders(&self) -> broadcast::Receiver<RenderLogEntry> {
        self.renders.subscribe()
    }

    pub fn log(&self) -> Vec<RenderLogEntry> {
        self.agent.lock().unwrap().log().to_vec()
    }

    pub fn with_agent<R>(&self, f: impl FnOnce(&PatientAgent) -> R) -> R {
        f(&self.agent.lock().unwrap())
    }

    /// Scans a tag, waiting out the detection latency (capped at the
    /// timeout) in real time.
    pub async fn scan(
        &self,
        tag_id: &str,
        detect_latency: std::time::Duration,
    ) -> Result<ScanOutcome, RunnerError> {
        let outcome = self
            .agent
            .lock()
            .unwrap()
            .scan_qr(tag_id, self.epoch.elapsed(), detect_latency)?;
        let at = match &outcome {
            ScanOutcome::Detected { at, .. } | ScanOutcome::Timeout { at } => *at,
        };
        tokio::time::sleep(at.saturating_sub(self.epoch.elapsed())).await;
        if let ScanOutcome::Detected { topic, .. } = &outcome {
            self.client
                .publish_wait(topic, "detected", QoS::AtLeastOnce, false)
                .await?;
        }
        Ok(outcome)
    }

    pub async fn confirm(&self, notif_id: u64) -> Result<(), RunnerError> {
        let (topic, body) = self.agent.lock().unwrap().confirm(notif_id)?;
        self.client
            .publish_wait(&topic, body, QoS::AtLeastOnce, false)
            .await?;
        Ok(())
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    /// Graceful disconnect; a persistent session keeps collecting
    /// notifications on the broker.
    /// Messages already acknowledged to the broker are rendered before
    /// this returns.
    pub async fn shutdown(mut self) {
        let _ = self.client.disconnect().await;
        let task = std::mem::replace(&mut self.task, tokio::spawn(async {}));
        let _ = tokio::time::timeout(std::time::Duration::from_secs(5), task).await;
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}
