use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use aal_core::devices::Topology;
use aal_core::qr::{QrReport, QrSizingInput, ScanConditions};
use aal_core::Notification;
use aal_mqtt::{Client, ClientConfig, QoS};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::frames::{
    check_publish_topic, decode_payload, parse_command, CommandError, CommandFrame, GatewayCommand, GatewayEvent,
    ServerFrame, GATEWAY_NOTIF_BASE,
};
use crate::hub::{Hub, HubEntry};

pub const UPSTREAM_FILTERS: [&str; 2] = ["home/#", "patient/#"];

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub bind: SocketAddr,
    /// `host:port` of the broker.
    pub broker: String,
    pub client_id: String,
    /// When set, `/events` and `/qr-size` need `Authorization: Bearer <token>`
    /// or `?token=<token>`.
    pub token: Option<String>,
    /// Source of the actuator command topics dashboards may publish to.
    pub topology: Topology,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl GatewayConfig {
    pub fn new(bind: SocketAddr, broker: impl Into<String>) -> Self {
        GatewayConfig {
            bind,
            broker: broker.into(),
            client_id: "gateway".into(),
            token: None,
            topology: Topology::default_topology(),
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind gateway listener: {0}")]
    Bind(#[from] std::io::Error),
}

struct AppState {
    hub: Hub,
    upstream: watch::Receiver<Option<Client>>,
    actuators: BTreeSet<String>,
    token: Option<String>,
    next_notif: AtomicU64,
    shutdown: watch::Receiver<bool>,
}

impl AppState {
    fn client(&self) -> Option<Client> {
        self.upstream.borrow().clone().filter(Client::is_connected)
    }
}

/// A running gateway: HTTP/WebSocket listener plus one upstream broker
/// session that reconnects with exponential backoff.
pub struct Gateway {
    local_addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: watch::Sender<bool>,
    server: JoinHandle<()>,
    upstream: JoinHandle<()>,
}

impl Gateway {
    pub async fn start(config: GatewayConfig) -> Result<Gateway, GatewayError> {
        let listener = TcpListener::bind(config.bind).await?;
        let local_addr = listener.local_addr()?;
        let (client_tx, client_rx) = watch::channel(None);
        let (shutdown_tx, shutdown_rx) = watch::channel(false);
        let actuators = config
            .topology
            .devices
            .iter()
            .filter_map(|d| d.command_topic())
            .collect();
        let state = Arc::new(AppState {
            hub: Hub::new(),
            upstream: client_rx,
            actuators,
            token: config.token.clone(),
            // Clock-based start so a restarted gateway does not reuse ids
            // a patient device has already seen.
            next_notif: AtomicU64::new(unix_millis().max(GATEWAY_NOTIF_BASE)),
            shutdown: shutdown_rx.clone(),
        });

        let upstream = tokio::spawn(upstream_loop(config, state.clone(), client_tx));
        let app = Router::new()
            .route("/health", get(health))
            .route("/events", get(events))
            .route("/qr-size", get(qr_size))
            .with_state(state.clone());
        let mut stop = shutdown_rx;
        let server = tokio::spawn(async move {
            let graceful = async move {
                let _ = stop.wait_for(|s| *s).await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(graceful).await {
                warn!(error = %e, "gateway listener failed");
            }
        });
        info!(addr = %local_addr, "gateway listening");
        Ok(Gateway {
            local_addr,
            state,
            shutdown: shutdown_tx,
            server,
            upstream,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn broker_connected(&self) -> bool {
        self.state.client().is_some()
    }

    pub fn hub(&self) -> &Hub {
        &self.state.hub
    }

    /// Closes every dashboard connection and the upstream session.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        self.upstream.abort();
        let _ = self.upstream.await;
        if let Some(client) = self.state.upstream.borrow().clone() {
            let _ = client.disconnect().await;
        }
        let _ = tokio::time::timeout(Duration::from_secs(5), self.server).await;
    }
}

fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

async fn upstream_loop(config: GatewayConfig, state: Arc<AppState>, client_tx: watch::Sender<Option<Client>>) {
    let mut backoff = config.initial_backoff;
    loop {
        match Client::connect(ClientConfig::new(&config.broker, &config.client_id)).await {
            Ok((client, mut inbound)) => {
                let filters: Vec<(&str, QoS)> = UPSTREAM_FILTERS.iter().map(|f| (*f, QoS::AtLeastOnce)).collect();
                match client.subscribe(&filters).await {
                    Ok(_) => {
                        info!(broker = %config.broker, "gateway connected upstream");
                        backoff = config.initial_backoff;
                        client_tx.send_replace(Some(client));
                        while let Some(d) = inbound.recv().await {
                            state.hub.publish(&d.topic, &d.payload, d.retain, unix_millis());
                        }
                        client_tx.send_replace(None);
                        warn!(broker = %config.broker, "gateway lost the broker");
                    }
                    Err(e) => {
                        warn!(error = %e, "gateway subscribe failed");
                        let _ = client.disconnect().await;
                    }
                }
            }
            Err(e) => debug!(error = %e, broker = %config.broker, "broker unreachable"),
        }
        tokio::time::sleep(backoff).await;
        backoff = (backoff * 2).min(config.max_backoff);
    }
}

#[derive(Debug, Deserialize)]
struct AuthQuery {
    token: Option<String>,
}

fn authorized(state: &AppState, headers: &HeaderMap, query_token: Option<&str>) -> bool {
    let Some(expected) = &state.token else {
        return true;
    };
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    bearer == Some(expected.as_str()) || query_token == Some(expected.as_str())
}

fn unauthorized() -> Response {
    (StatusCode::UNAUTHORIZED, Json(json!({"error": "missing or wrong token"}))).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let connected = state.client().is_some();
    let (code, status) = if connected {
        (StatusCode::OK, "ok")
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, "broker_unavailable")
    };
    (code, Json(json!({"status": status, "broker_connected": connected}))).into_response()
}

async fn events(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(auth): Query<AuthQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    if !authorized(&state, &headers, auth.token.as_deref()) {
        return unauthorized();
    }
    if state.client().is_none() {
        return (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"error": "broker unavailable"})),
        )
            .into_response();
    }
    ws.on_upgrade(move |socket| session(state, socket))
}

fn event_frame(seq: u64, e: HubEntry) -> ServerFrame {
    ServerFrame::Event(GatewayEvent {
        seq,
        topic: e.topic,
        payload: e.payload,
        binary: e.binary,
        retain: e.retain,
        server_time: e.server_time,
    })
}

async fn send(socket: &mut WebSocket, frame: &ServerFrame) -> Result<(), axum::Error> {
    let text = serde_json::to_string(frame).expect("frames serialize");
    socket.send(Message::Text(text.into())).await
}

async fn session(state: Arc<AppState>, mut socket: WebSocket) {
    let (snapshot, mut live) = state.hub.attach();
    let mut seq = 0;
    let count = snapshot.len();
    for entry in snapshot {
        seq += 1;
        if send(&mut socket, &event_frame(seq, entry)).await.is_err() {
            return;
        }
    }
    if send(&mut socket, &ServerFrame::SnapshotEnd { count }).await.is_err() {
        return;
    }

    // One worker per connection keeps a dashboard's commands in order.
    let (cmd_tx, mut cmd_rx) = mpsc::unbounded_channel::<CommandFrame>();
    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel();
    let worker = {
        let state = state.clone();
        let reply_tx = reply_tx.clone();
        tokio::spawn(async move {
            while let Some(frame) = cmd_rx.recv().await {
                let reply = handle_command(&state, frame).await;
                if reply_tx.send(reply).is_err() {
                    break;
                }
            }
        })
    };

    let mut shutdown = state.shutdown.clone();
    loop {
        let frame = tokio::select! {
            entry = live.recv() => match entry {
                Some(e) => {
                    seq += 1;
                    event_frame(seq, e)
                }
                None => break,
            },
            Some(reply) = reply_rx.recv() => reply,
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => match parse_command(&text) {
                    Ok(cmd) => {
                        let _ = cmd_tx.send(cmd);
                        continue;
                    }
                    Err(e) => e.into_frame(),
                },
                Some(Ok(Message::Binary(_))) => CommandError::new(None, "commands must be JSON text frames").into_frame(),
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => continue,
            },
            _ = shutdown.wait_for(|s| *s) => break,
        };
        if send(&mut socket, &frame).await.is_err() {
            break;
        }
    }
    worker.abort();
    let _ = socket.send(Message::Close(None)).await;
}

async fn handle_command(state: &AppState, frame: CommandFrame) -> ServerFrame {
    let seq = frame.seq;
    let Some(client) = state.client() else {
        return CommandError::new(seq, "broker unavailable").into_frame();
    };
    let (topic, payload, notif_id) = match frame.command {
        GatewayCommand::Publish { topic, payload, binary } => {
            if let Err(reason) = check_publish_topic(&topic, &state.actuators) {
                return CommandError::new(seq, reason).into_frame();
            }
            match decode_payload(&payload, binary) {
                Ok(bytes) => (topic, bytes, None),
                Err(reason) => return CommandError::new(seq, reason).into_frame(),
            }
        }
        GatewayCommand::Notify { modality, asset, text } => {
            let notification = Notification {
                notif_id: state.next_notif.fetch_add(1, Ordering::Relaxed),
                modality,
                asset_ref: asset,
                text,
                created_at: unix_millis(),
                confirm_rule: None,
            };
            (
                notification.topic(),
                notification.to_json().into_bytes(),
                Some(notification.notif_id),
            )
        }
    };
    match client.publish_wait(&topic, payload, QoS::AtLeastOnce, false).await {
        Ok(()) => ServerFrame::Ack { seq, topic, notif_id },
        Err(e) => CommandError::new(seq, format!("broker did not accept the publish: {e}")).into_frame(),
    }
}

#[derive(Debug, Default, Deserialize)]
struct QrQuery {
    token: Option<String>,
    d_scan_mm: Option<f64>,
    poor_lighting: Option<bool>,
    mid_light_colored_code: Option<bool>,
    not_front_on: Option<bool>,
    modules_per_side: Option<u32>,
    pixels_per_module: Option<u32>,
    fov_mm: Option<f64>,
    resolution_pixels: Option<f64>,
    aspect_phi: Option<f64>,
}

impl QrQuery {
    fn input(&self) -> QrSizingInput {
        let d = QrSizingInput::default();
        QrSizingInput {
            d_scan_mm: self.d_scan_mm.unwrap_or(d.d_scan_mm),
            conditions: ScanConditions {
                poor_lighting: self.poor_lighting.unwrap_or(false),
                mid_light_colored_code: self.mid_light_colored_code.unwrap_or(false),
                not_front_on: self.not_front_on.unwrap_or(false),
            },
            modules_per_side: self.modules_per_side.unwrap_or(d.modules_per_side),
            pixels_per_module: self.pixels_per_module.unwrap_or(d.pixels_per_module),
            fov_mm: self.fov_mm.unwrap_or(d.fov_mm),
            resolution_pixels: self.resolution_pixels.unwrap_or(d.resolution_pixels),
            aspect_phi: self.aspect_phi.unwrap_or(d.aspect_phi),
        }
    }
}

async fn qr_size(State(state): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<QrQuery>) -> Response {
    if !authorized(&state, &headers, q.token.as_deref()) {
        return unauthorized();
    }
    match QrReport::new(q.input()) {
        Ok(report) => Json(report).into_response(),
        Err(e) => (StatusCode::BAD_REQUEST, Json(json!({"error": e.to_string()}))).into_response(),
    }
}
