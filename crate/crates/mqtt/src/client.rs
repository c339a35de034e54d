//! Async MQTT client used by the devices, rule engine, patient agent,
//! gateway and bench harness.
//!
//! One background task owns the socket. Publishes may be issued from any
//! number of clones of [`Client`]; inbound messages surface on a single
//! [`Inbound`] stream in the order they arrived on the connection.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::{Buf, Bytes, BytesMut};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;
use tracing::{debug, warn};

use crate::codec::{
    encode_packet, Connect, ConnectReturnCode, DecodeError, Decoder, EncodeError, Packet, Publish,
    QoS, SubackCode, Subscribe, Unsubscribe,
};
use crate::topic::{self, TopicError};

pub const MAX_CLIENT_ID_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconnectPolicy {
    Off,
    FixedDelay(Duration),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// `host:port` of the broker.
    pub broker: String,
    pub client_id: String,
    pub clean_session: bool,
    pub keep_alive_secs: u16,
    pub reconnect: ReconnectPolicy,
    pub connect_timeout: Duration,
    pub operation_timeout: Duration,
}

impl ClientConfig {
    pub fn new(broker: impl Into<String>, client_id: impl Into<String>) -> Self {
        ClientConfig {
            broker: broker.into(),
            client_id: client_id.into(),
            clean_session: true,
            keep_alive_secs: 30,
            reconnect: ReconnectPolicy::Off,
            connect_timeout: Duration::from_secs(5),
            operation_timeout: Duration::from_secs(5),
        }
    }

    pub fn persistent(mut self) -> Self {
        self.clean_session = false;
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.client_id.is_empty() {
            return Err(ClientError::InvalidConfig("client_id is empty".into()));
        }
        if self.client_id.chars().count() > MAX_CLIENT_ID_LEN {
            return Err(ClientError::InvalidConfig(format!(
                "client_id longer than {MAX_CLIENT_ID_LEN} characters"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid client configuration: {0}")]
    InvalidConfig(String),
    #[error("network error: {0}")]
    Network(#[from] std::io::Error),
    #[error("connection refused by broker: {0:?}")]
    Refused(ConnectReturnCode),
    #[error("operation timed out")]
    Timeout,
    #[error("client is disconnected")]
    Disconnected,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("subscription rejected for {0:?}")]
    SubscribeRejected(Vec<String>),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// One application message received from the broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub topic: String,
    pub payload: Bytes,
    pub qos: QoS,
    pub retain: bool,
    pub dup: bool,
}

impl Delivery {
    pub fn payload_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.payload).ok()
    }
}

impl From<Publish> for Delivery {
    fn from(p: Publish) -> Self {
        Delivery {
            topic: p.topic,
            payload: p.payload,
            qos: p.qos,
            retain: p.retain,
            dup: p.dup,
        }
    }
}

/// Decides when to send PINGREQ and when a silent broker counts as dead.
#[derive(Debug, Clone)]
pub struct KeepaliveTimer {
    interval: Duration,
    last_sent: Duration,
    ping_sent_at: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepaliveAction {
    Idle,
    SendPing,
    Dead,
}

impl KeepaliveTimer {
    pub fn new(keep_alive_secs: u16, now: Duration) -> Self {
        KeepaliveTimer {
            interval: Duration::from_secs(keep_alive_secs as u64),
            last_sent: now,
            ping_sent_at: None,
        }
    }

    pub fn on_sent(&mut self, now: Duration) {
        self.last_sent = now;
    }

    pub fn on_received(&mut self) {
        self.ping_sent_at = None;
    }

    /// A ping goes out once a full keepalive interval passes without any
    /// outbound packet, which is always before the broker's 1.5x deadline.
    pub fn drive(&mut self, now: Duration) -> KeepaliveAction {
        if self.interval.is_zero() {
            return KeepaliveAction::Idle;
        }
        if let Some(sent) = self.ping_sent_at {
            if now.saturating_sub(sent) >= self.interval {
                return KeepaliveAction::Dead;
            }
            return KeepaliveAction::Idle;
        }
        if now.saturating_sub(self.last_sent) >= self.interval {
            self.ping_sent_at = Some(now);
            self.last_sent = now;
            return KeepaliveAction::SendPing;
        }
        KeepaliveAction::Idle
    }
}

type Reply<T> = oneshot::Sender<Result<T, ClientError>>;

enum Command {
    Publish {
        publish: Publish,
        done: Reply<()>,
    },
    Subscribe {
        filters: Vec<(String, QoS)>,
        done: Reply<Vec<SubackCode>>,
    },
    Unsubscribe {
        filters: Vec<String>,
        done: Reply<()>,
    },
    Disconnect {
        done: oneshot::Sender<()>,
    },
    Abort,
}

struct Status {
    connected: AtomicBool,
    session_present: AtomicBool,
}

/// Cloneable handle to a live connection.
#[derive(Clone)]
pub struct Client {
    commands: mpsc::UnboundedSender<Command>,
    status: Arc<Status>,
    config: Arc<ClientConfig>,
}

/// Single-consumer stream of inbound messages. Ends when the connection is
/// gone for good.
pub struct Inbound {
    rx: mpsc::UnboundedReceiver<Delivery>,
}

impl Inbound {
    pub async fn recv(&mut self) -> Option<Delivery> {
        self.rx.recv().await
    }

    pub fn try_recv(&mut self) -> Option<Delivery> {
        self.rx.try_recv().ok()
    }
}

/// Completes on socket write for QoS 0 and on PUBACK for QoS 1.
pub struct DeliveryToken {
    rx: oneshot::Receiver<Result<(), ClientError>>,
    timeout: Duration,
}

impl DeliveryToken {
    pub async fn wait(self) -> Result<(), ClientError> {
        match tokio::time::timeout(self.timeout, self.rx).await {
            Ok(Ok(result)) => result,
            Ok(Err(_)) => Err(ClientError::Disconnected),
            Err(_) => Err(ClientError::Timeout),
        }
    }
}

struct Link {
    reader: OwnedReadHalf,
    writer: OwnedWriteHalf,
    buf: BytesMut,
    session_present: bool,
}

async fn open_link(config: &ClientConfig) -> Result<Link, ClientError> {
    let attempt = async {
        let stream = TcpStream::connect(&config.broker).await?;
        let _ = stream.set_nodelay(true);
        let (mut reader, mut writer) = stream.into_split();
        let connect = Packet::Connect(Connect {
            client_id: config.client_id.clone(),
            clean_session: config.clean_session,
            keep_alive: config.keep_alive_secs,
        });
        writer.write_all(&encode_packet(&connect)?).await?;
        let mut buf = BytesMut::with_capacity(4096);
        let decoder = Decoder::default();
        loop {
            if let Some((packet, used)) = decoder.decode(&buf)? {
                buf.advance(used);
                return match packet {
                    Packet::Connack(ack) if ack.code == ConnectReturnCode::Accepted => Ok(Link {
                        reader,
                        writer,
                        buf,
                        session_present: ack.session_present,
                    }),
                    Packet::Connack(ack) => Err(ClientError::Refused(ack.code)),
                    other => Err(ClientError::Protocol(format!(
                        "expected CONNACK, got {:?}",
                        other.packet_type()
                    ))),
                };
            }
            if reader.read_buf(&mut buf).await? == 0 {
                return Err(ClientError::Disconnected);
            }
        }
    };
    tokio::time::timeout(config.connect_timeout, attempt)
        .await
        .map_err(|_| ClientError::Timeout)?
}

impl Client {
    /// Connects and waits for CONNACK.
    pub async fn connect(config: ClientConfig) -> Result<(Client, Inbound), ClientError> {
        config.validate()?;
        let link = open_link(&config).await?;
        let status = Arc::new(Status {
            connected: AtomicBool::new(true),
            session_present: AtomicBool::new(link.session_present),
        });
        let (commands, command_rx) = mpsc::unbounded_channel();
        let (inbound_tx, inbound_rx) = mpsc::unbounded_channel();
        let config = Arc::new(config);
        tokio::spawn(event_loop(
            config.clone(),
            link,
            command_rx,
            inbound_tx,
            status.clone(),
        ));
        Ok((
            Client {
                commands,
                status,
                config,
            },
            Inbound { rx: inbound_rx },
        ))
    }

    pub fn client_id(&self) -> &str {
        &self.config.client_id
    }

    /// Whether the broker resumed a stored session on the latest connect.
    pub fn session_present(&self) -> bool {
        self.status.session_present.load(Ordering::SeqCst)
    }

    pub fn is_connected(&self) -> bool {
        self.status.connected.load(Ordering::SeqCst)
    }

    pub async fn publish(
        &self,
        topic_name: &str,
        payload: impl Into<Bytes>,
        qos: QoS,
        retain: bool,
    ) -> Result<DeliveryToken, ClientError> {
        topic::validate_topic_name(topic_name)?;
        if qos == QoS::ExactlyOnce {
            return Err(ClientError::InvalidConfig("QoS 2 is unsupported".into()));
        }
        let (done, rx) = oneshot::channel();
        let publish = Publish {
            dup: false,
            qos,
            retain,
            topic: topic_name.to_owned(),
            packet_id: None,
            payload: payload.into(),
        };
        self.send(Command::Publish { publish, done })?;
        Ok(DeliveryToken {
            rx,
            timeout: self.config.operation_timeout,
        })
    }

    /// Publishes and waits for the delivery token.
    pub async fn publish_wait(
        &self,
        topic_name: &str,
        payload: impl Into<Bytes>,
        qos: QoS,
        retain: bool,
    ) -> Result<(), ClientError> {
        self.publish(topic_name, payload, qos, retain).await?.wait().await
    }

    /// Subscribes and waits for SUBACK. Any filter the broker refused is
    /// reported as [`ClientError::SubscribeRejected`]; the accepted ones
    /// remain active.
    pub async fn subscribe(&self, filters: &[(&str, QoS)]) -> Result<Vec<SubackCode>, ClientError> {
        for (filter, _) in filters {
            topic::validate_topic_filter(filter)?;
        }
        let filters: Vec<(String, QoS)> =
            filters.iter().map(|(f, q)| (f.to_string(), *q)).collect();
        let (done, rx) = oneshot::channel();
        self.send(Command::Subscribe {
            filters: filters.clone(),
            done,
        })?;
        let codes = self.await_reply(rx).await?;
        let rejected: Vec<String> = filters
            .iter()
            .zip(&codes)
            .filter(|(_, c)| **c == SubackCode::Failure)
            .map(|((f, _), _)| f.clone())
            .collect();
        if !rejected.is_empty() {
            return Err(ClientError::SubscribeRejected(rejected));
        }
        Ok(codes)
    }

    pub async fn unsubscribe(&self, filters: &[&str]) -> Result<(), ClientError> {
        let (done, rx) = oneshot::channel();
        self.send(Command::Unsubscribe {
            filters: filters.iter().map(|f| f.to_string()).collect(),
            done,
        })?;
        self.await_reply(rx).await
    }

    /// Sends DISCONNECT and closes the socket.
    pub async fn disconnect(&self) -> Result<(), ClientError> {
        let (done, rx) = oneshot::channel();
        self.send(Command::Disconnect { done })?;
        let _ = tokio::time::timeout(self.config.operation_timeout, rx).await;
        Ok(())
    }

    /// Drops the socket without DISCONNECT, as a crash would.
    pub fn abort(&self) {
        let _ = self.commands.send(Command::Abort);
    }

    fn send(&self, command: Command) -> Result<(), ClientError> {
        self.commands
            .send(command)
            .map_err(|_| ClientError::Disconnected)
    }

    async fn await_reply<T>(
        &self,
        rx: oneshot::Receiver<Result<T, ClientError>>,
    ) -> Result<T, ClientError> {
        match tokio::time::timeout(self.config.operation_timeout, rx).await {
            Ok(Ok(result)) => result,
            Ok(Err(_)) => Err(ClientError::Disconnected),
            Err(_) => Err(ClientError::Timeout),
        }
    }
}

enum Pending {
    Puback(Reply<()>),
    Suback(Reply<Vec<SubackCode>>),
    Unsuback(Reply<()>),
    /// SUBSCRIBE replayed after an automatic reconnect.
    Resubscribe,
}

impl Pending {
    fn fail(self) {
        match self {
            Pending::Puback(r) | Pending::Unsuback(r) => {
                let _ = r.send(Err(ClientError::Disconnected));
            }
            Pending::Suback(r) => {
                let _ = r.send(Err(ClientError::Disconnected));
            }
            Pending::Resubscribe => {}
        }
    }
}

enum LinkEnd {
    /// Caller asked to stop.
    Finished,
    Lost,
}

struct LoopState {
    pending: HashMap<u16, Pending>,
    next_packet_id: u16,
    subscriptions: Vec<(String, QoS)>,
}

impl LoopState {
    fn allocate(&mut self) -> u16 {
        loop {
            let id = self.next_packet_id;
            self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
            if !self.pending.contains_key(&id) {
                return id;
            }
        }
    }
}

async fn event_loop(
    config: Arc<ClientConfig>,
    mut link: Link,
    mut commands: mpsc::UnboundedReceiver<Command>,
    inbound: mpsc::UnboundedSender<Delivery>,
    status: Arc<Status>,
) {
    let mut state = LoopState {
        pending: HashMap::new(),
        next_packet_id: 1,
        subscriptions: Vec::new(),
    };
    loop {
        let end = run_link(&config, &mut link, &mut commands, &inbound, &mut state).await;
        status.connected.store(false, Ordering::SeqCst);
        for (_, p) in state.pending.drain() {
            p.fail();
        }
        let delay = match (end, config.reconnect) {
            (LinkEnd::Lost, ReconnectPolicy::FixedDelay(delay)) => delay,
            _ => break,
        };
        loop {
            tokio::time::sleep(delay).await;
            if commands.is_closed() {
                return;
            }
            match open_link(&config).await {
                Ok(new_link) => {
                    link = new_link;
                    break;
                }
                Err(e) => debug!(client_id = config.client_id.as_str(), error = %e, "reconnect failed"),
            }
        }
        status.connected.store(true, Ordering::SeqCst);
        status
            .session_present
            .store(link.session_present, Ordering::SeqCst);
        if !link.session_present && !state.subscriptions.is_empty() {
            let packet_id = state.allocate();
            let packet = Packet::Subscribe(Subscribe {
                packet_id,
                filters: state.subscriptions.clone(),
            });
            if let Ok(bytes) = encode_packet(&packet) {
                if link.writer.write_all(&bytes).await.is_ok() {
                    state.pending.insert(packet_id, Pending::Resubscribe);
                }
            }
        }
    }
}

async fn run_link(
    config: &ClientConfig,
    link: &mut Link,
    commands: &mut mpsc::UnboundedReceiver<Command>,
    inbound: &mpsc::UnboundedSender<Delivery>,
    state: &mut LoopState,
) -> LinkEnd {
    let decoder = Decoder::default();
    let start = Instant::now();
    let mut keepalive = KeepaliveTimer::new(config.keep_alive_secs, Duration::ZERO);
    let tick = (Duration::from_secs(config.keep_alive_secs as u64) / 4)
        .max(Duration::from_millis(50));
    let mut ticker = tokio::time::interval(tick);

    macro_rules! send_packet {
        ($packet:expr) => {{
            match encode_packet(&$packet) {
                Ok(bytes) => {
                    if link.writer.write_all(&bytes).await.is_err() {
                        return LinkEnd::Lost;
                    }
                    keepalive.on_sent(start.elapsed());
                    Ok(())
                }
                Err(e) => Err(ClientError::from(e)),
            }
        }};
    }

    // Bytes that arrived together with CONNACK.
    let mut fresh_read = !link.buf.is_empty();
    loop {
        if fresh_read {
            fresh_read = false;
            loop {
                let (packet, used) = match decoder.decode(&link.buf) {
                    Ok(Some(x)) => x,
                    Ok(None) => break,
                    Err(e) => {
                        warn!(client_id = config.client_id.as_str(), error = %e, "malformed packet from broker");
                        return LinkEnd::Lost;
                    }
                };
                link.buf.advance(used);
                keepalive.on_received();
                match packet {
                    Packet::Publish(p) => {
                        let ack = p.packet_id.filter(|_| p.qos == QoS::AtLeastOnce);
                        let _ = inbound.send(Delivery::from(p));
                        if let Some(packet_id) = ack {
                            let _ = send_packet!(Packet::Puback { packet_id });
                        }
                    }
                    Packet::Puback { packet_id } => {
                        if let Some(Pending::Puback(r)) = state.pending.remove(&packet_id) {
                            let _ = r.send(Ok(()));
                        }
                    }
                    Packet::Suback(s) => match state.pending.remove(&s.packet_id) {
                        Some(Pending::Suback(r)) => {
                            let _ = r.send(Ok(s.codes));
                        }
                        Some(other) => other.fail(),
                        None => {}
                    },
                    Packet::Unsuback { packet_id } => {
                        if let Some(Pending::Unsuback(r)) = state.pending.remove(&packet_id) {
                            let _ = r.send(Ok(()));
                        }
                    }
                    Packet::Pingresp => {}
                    other => {
                        warn!(client_id = config.client_id.as_str(), packet = ?other.packet_type(), "unexpected packet from broker");
                        return LinkEnd::Lost;
                    }
                }
            }
        }

        tokio::select! {
            read = link.reader.read_buf(&mut link.buf) => {
                match read {
                    Ok(0) | Err(_) => return LinkEnd::Lost,
                    Ok(_) => fresh_read = true,
                }
            }
            command = commands.recv() => {
                let Some(command) = command else {
                    let _ = send_packet!(Packet::Disconnect);
                    let _ = link.writer.shutdown().await;
                    return LinkEnd::Finished;
                };
                match command {
                    Command::Publish { mut publish, done } => {
                        let qos1 = publish.qos == QoS::AtLeastOnce;
                        let packet_id = qos1.then(|| state.allocate());
                        publish.packet_id = packet_id;
                        match send_packet!(Packet::Publish(publish)) {
                            Ok(()) => match packet_id {
                                Some(id) => {
                                    state.pending.insert(id, Pending::Puback(done));
                                }
                                None => {
                                    let _ = done.send(Ok(()));
                                }
                            },
                            Err(e) => {
                                let _ = done.send(Err(e));
                            }
                        }
                    }
                    Command::Subscribe { filters, done } => {
                        let packet_id = state.allocate();
                        let packet = Packet::Subscribe(Subscribe { packet_id, filters: filters.clone() });
                        match send_packet!(packet) {
                            Ok(()) => {
                                for (filter, qos) in filters {
                                    match state.subscriptions.iter_mut().find(|(f, _)| *f == filter) {
                                        Some(entry) => entry.1 = qos,
                                        None => state.subscriptions.push((filter, qos)),
                                    }
                                }
                                state.pending.insert(packet_id, Pending::Suback(done));
                            }
                            Err(e) => {
                                let _ = done.send(Err(e));
                            }
                        }
                    }
                    Command::Unsubscribe { filters, done } => {
                        let packet_id = state.allocate();
                        state.subscriptions.retain(|(f, _)| !filters.contains(f));
                        match send_packet!(Packet::Unsubscribe(Unsubscribe { packet_id, filters })) {
                            Ok(()) => {
                                state.pending.insert(packet_id, Pending::Unsuback(done));
                            }
                            Err(e) => {
                                let _ = done.send(Err(e));
                            }
                        }
                    }
                    Command::Disconnect { done } => {
                        let _ = send_packet!(Packet::Disconnect);
                        let _ = link.writer.shutdown().await;
                        let _ = done.send(());
                        return LinkEnd::Finished;
                    }
                    Command::Abort => return LinkEnd::Finished,
                }
            }
            _ = ticker.tick() => {
                match keepalive.drive(start.elapsed()) {
                    KeepaliveAction::Idle => {}
                    KeepaliveAction::SendPing => {
                        let _ = send_packet!(Packet::Pingreq);
                    }
                    KeepaliveAction::Dead => {
                        warn!(client_id = config.client_id.as_str(), "no response to PINGREQ");
                        return LinkEnd::Lost;
                    }
                }
            }
        }
    }
}
