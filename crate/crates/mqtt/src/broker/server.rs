//! Tokio TCP front end for [`Broker`].
//!
//! All packet handling runs under one lock that also owns the per-connection
//! writer queues, so fan-out is linearizable: every subscriber observes the
//! same global publish order.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::{Buf, BytesMut};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;
use tracing::{info, warn};

use super::session::ConnId;
use super::state::{Action, Broker, BrokerConfig, BrokerSnapshot};
use crate::codec::{encode_packet, Decoder, Packet};

const TICK: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub broker: BrokerConfig,
    pub snapshot_path: Option<PathBuf>,
}

impl ServerConfig {
    pub fn new(bind: SocketAddr) -> Self {
        ServerConfig {
            bind,
            broker: BrokerConfig::default(),
            snapshot_path: None,
        }
    }
}

enum Outgoing {
    Packet(Packet),
    Close,
}

struct ConnHandle {
    tx: mpsc::UnboundedSender<Outgoing>,
    kill: Arc<Notify>,
}

struct Core {
    broker: Broker,
    conns: HashMap<ConnId, ConnHandle>,
}

impl Core {
    fn apply(&mut self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send { conn, packet } => {
                    if let Some(handle) = self.conns.get(&conn) {
                        let _ = handle.tx.send(Outgoing::Packet(packet));
                    }
                }
                Action::Close { conn, .. } => {
                    if let Some(handle) = self.conns.remove(&conn) {
                        let _ = handle.tx.send(Outgoing::Close);
                        handle.kill.notify_one();
                    }
                }
            }
        }
    }
}

struct Shared {
    core: Mutex<Core>,
    epoch: Instant,
    next_conn: AtomicU64,
    decoder: Decoder,
}

impl Shared {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }
}

/// A running broker bound to a TCP port.
pub struct BrokerServer {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    snapshot_path: Option<PathBuf>,
    tasks: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    /// Binds the listener, restoring a snapshot first when one exists.
    pub async fn start(config: ServerConfig) -> std::io::Result<BrokerServer> {
        let broker = match &config.snapshot_path {
            Some(path) if path.exists() => {
                let snapshot = BrokerSnapshot::load(path)?;
                info!(
                    event = "snapshot_restored",
                    sessions = snapshot.sessions.len(),
                    retained = snapshot.retained.len()
                );
                Broker::restore(config.broker.clone(), snapshot)
            }
            _ => Broker::new(config.broker.clone()),
        };
        let listener = TcpListener::bind(config.bind).await?;
        let local_addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            core: Mutex::new(Core {
                broker,
                conns: HashMap::new(),
            }),
            epoch: Instant::now(),
            next_conn: AtomicU64::new(1),
            decoder: Decoder::new(config.broker.max_packet_bytes),
        });
        info!(event = "listening", addr = %local_addr);

        let accept = tokio::spawn(accept_loop(listener, shared.clone()));
        let ticker = tokio::spawn(tick_loop(shared.clone()));
        Ok(BrokerServer {
            local_addr,
            shared,
            snapshot_path: config.snapshot_path,
            tasks: vec![accept, ticker],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Read access to the live broker state.
    pub fn inspect<R>(&self, f: impl FnOnce(&Broker) -> R) -> R {
        let core = self.shared.core.lock().expect("broker lock poisoned");
        f(&core.broker)
    }

    /// Stops accepting, drops every connection and writes the snapshot if
    /// a path was configured.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        let tasks: Vec<JoinHandle<()>> = self.tasks.drain(..).collect();
        for task in &tasks {
            task.abort();
        }
        // Wait so the listening socket is closed before returning.
        for task in tasks {
            let _ = task.await;
        }
        let snapshot = {
            let mut core = self.shared.core.lock().expect("broker lock poisoned");
            let conns: Vec<ConnId> = core.conns.keys().copied().collect();
            let now = self.shared.now();
            for conn in conns {
                if let Some(handle) = core.conns.remove(&conn) {
                    let _ = handle.tx.send(Outgoing::Close);
                    handle.kill.notify_one();
                }
                core.broker.connection_lost(conn, now);
            }
            core.broker.snapshot()
        };
        if let Some(path) = &self.snapshot_path {
            snapshot.save(path)?;
            info!(event = "snapshot_saved", path = %path.display());
        }
        Ok(())
    }

    fn stop_tasks(&mut self) {
        for task in self.tasks.drain(..) {
            task.abort();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.stop_tasks();
        if let Ok(mut core) = self.shared.core.lock() {
            for (_, handle) in core.conns.drain() {
                let _ = handle.tx.send(Outgoing::Close);
                handle.kill.notify_one();
            }
        }
    }
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                let _ = stream.set_nodelay(true);
                let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
                tokio::spawn(serve_connection(shared.clone(), stream, conn, peer));
            }
            Err(e) => {
                warn!(event = "accept_failed", error = %e);
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

async fn tick_loop(shared: Arc<Shared>) {
    let mut interval = tokio::time::interval(TICK);
    loop {
        interval.tick().await;
        let mut core = shared.core.lock().expect("broker lock poisoned");
        let actions = core.broker.tick(shared.now());
        core.apply(actions);
    }
}

async fn serve_connection(shared: Arc<Shared>, stream: TcpStream, conn: ConnId, peer: SocketAddr) {
    let (mut reader, writer) = stream.into_split();
    let (tx, rx) = mpsc::unbounded_channel();
    let kill = Arc::new(Notify::new());
    {
        let mut core = shared.core.lock().expect("broker lock poisoned");
        core.conns.insert(
            conn,
            ConnHandle {
                tx,
                kill: kill.clone(),
            },
        );
        core.broker.connection_opened(conn, shared.now());
    }
    let write_task = tokio::spawn(write_loop(writer, rx));

    let mut buf = BytesMut::with_capacity(4096);
    'read: loop {
        tokio::select! {
            read = reader.read_buf(&mut buf) => {
                match read {
                    Ok(0) => break 'read,
                    Ok(_) => {}
                    Err(e) => {
                        warn!(event = "read_failed", conn, peer = %peer, error = %e);
                        break 'read;
                    }
                }
            }
            _ = kill.notified() => break 'read,
        }
        loop {
            match shared.decoder.decode(&buf) {
                Ok(Some((packet, used))) => {
                    buf.advance(used);
                    let mut core = shared.core.lock().expect("broker lock poisoned");
                    let actions = core.broker.handle_packet(conn, packet, shared.now());
                    core.apply(actions);
                }
                Ok(None) => break,
                Err(e) => {
                    warn!(event = "malformed_packet", conn, peer = %peer, error = %e);
                    break 'read;
                }
            }
        }
    }

    {
        let mut core = shared.core.lock().expect("broker lock poisoned");
        core.broker.connection_lost(conn, shared.now());
        if let Some(handle) = core.conns.remove(&conn) {
            let _ = handle.tx.send(Outgoing::Close);
        }
    }
    let _ = write_task.await;
}

async fn write_loop(mut writer: OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<Outgoing>) {
    while let Some(item) = rx.recv().await {
        match item {
            Outgoing::Packet(packet) => {
                let bytes = match encode_packet(&packet) {
                    Ok(b) => b,
                    Err(e) => {
                        warn!(event = "encode_failed", error = %e);
                        continue;
                    }
                };
                if writer.write_all(&bytes).await.is_err() {
                    break;
                }
            }
            Outgoing::Close => break,
        }
    }
    let _ = writer.shutdown().await;
}
