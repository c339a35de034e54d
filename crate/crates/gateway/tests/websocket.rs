//! Dashboard-facing behaviour over real sockets.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use aal_core::devices::{Fleet, FleetRunner, Topology};
use aal_core::patient::{AgentRunner, PatientAgent};
use aal_core::rules::{EngineRunner, RuleEngine, RuleSet};
use aal_core::RenderCosts;
use aal_gateway::{Gateway, GatewayConfig, GATEWAY_NOTIF_BASE};
use aal_mqtt::{BrokerServer, Client, ClientConfig, QoS, ServerConfig};
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn broker_at(addr: &str) -> BrokerServer {
    BrokerServer::start(ServerConfig::new(addr.parse().unwrap())).await.unwrap()
}

async fn gateway(broker: &str, token: Option<&str>) -> Gateway {
    let mut config = GatewayConfig::new("127.0.0.1:0".parse().unwrap(), broker);
    config.token = token.map(str::to_owned);
    config.initial_backoff = Duration::from_millis(50);
    config.max_backoff = Duration::from_millis(200);
    let gw = Gateway::start(config).await.unwrap();
    wait_until(|| gw.broker_connected()).await;
    gw
}

async fn wait_until(mut check: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while !check() {
        assert!(Instant::now() < deadline, "condition not met within 5 s");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn dashboard(addr: SocketAddr) -> Ws {
    connect_async(format!("ws://{addr}/events")).await.unwrap().0
}

async fn next(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("no frame within 5 s")
            .unwrap()
            .unwrap();
        if let Message::Text(text) = msg {
            return serde_json::from_str(&text).unwrap();
        }
    }
}

/// Reads frames until one satisfies `pred`, returning everything read.
async fn until(ws: &mut Ws, pred: impl Fn(&Value) -> bool) -> Vec<Value> {
    let mut seen = Vec::new();
    loop {
        let f = next(ws).await;
        let done = pred(&f);
        seen.push(f);
        if done {
            return seen;
        }
    }
}

async fn snapshot(ws: &mut Ws) -> Vec<Value> {
    let mut frames = until(ws, |f| f["type"] == "snapshot_end").await;
    let end = frames.pop().unwrap();
    assert_eq!(end["count"], frames.len());
    frames
}

async fn command(ws: &mut Ws, cmd: Value) {
    ws.send(Message::Text(cmd.to_string().into())).await.unwrap();
}

async fn reply(ws: &mut Ws) -> Value {
    until(ws, |f| f["type"] == "ack" || f["type"] == "error").await.pop().unwrap()
}

async fn http_get(addr: SocketAddr, path: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let request = format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n");
    stream.write_all(request.as_bytes()).await.unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).await.unwrap();
    let status = raw[9..12].parse().unwrap();
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b.to_owned()).unwrap_or_default();
    (status, body)
}

#[tokio::test]
async fn snapshot_replays_retained_state_first() {
    let broker = broker_at("127.0.0.1:0").await;
    let addr = broker.local_addr().to_string();
    let (c, _in) = Client::connect(ClientConfig::new(&addr, "sensor")).await.unwrap();
    c.publish_wait("home/kitchen/flame", "1", QoS::AtLeastOnce, true).await.unwrap();

    let gw = gateway(&addr, None).await;
    wait_until(|| !gw.hub().attach().0.is_empty()).await;
    let mut ws = dashboard(gw.local_addr()).await;
    let snap = snapshot(&mut ws).await;
    assert_eq!(snap.len(), 1);
    assert_eq!(snap[0]["topic"], "home/kitchen/flame");
    assert_eq!(snap[0]["payload"], "1");
    assert_eq!(snap[0]["retain"], true);
    assert_eq!(snap[0]["seq"], 1);

    c.publish_wait("home/kitchen/flame", "0", QoS::AtLeastOnce, true).await.unwrap();
    let live = next(&mut ws).await;
    assert_eq!((live["seq"].as_u64(), live["payload"].as_str()), (Some(2), Some("0")));
    assert_eq!(live["retain"], false);
    assert!(live["server_time"].as_u64().unwrap() > 1_600_000_000_000);

    gw.shutdown().await;
    broker.shutdown().await.unwrap();
}

#[tokio::test]
async fn dashboards_see_identical_sequences() {
    let broker = broker_at("127.0.0.1:0").await;
    let addr = broker.local_addr().to_string();
    let gw = gateway(&addr, None).await;
    let mut a = dashboard(gw.local_addr()).await;
    let mut b = dashboard(gw.local_addr()).await;
    snapshot(&mut a).await;
    snapshot(&mut b).await;

    let (c, _in) = Client::connect(ClientConfig::new(&addr, "sensor")).await.unwrap();
    for i in 0..20 {
        let topic = if i % 2 == 0 { "home/tvroom/temperature" } else { "patient/qr/bedroom_door" };
        c.publish_wait(topic, format!("{i}"), QoS::AtLeastOnce, false).await.unwrap();
    }
    c.publish_wait("home/blob", vec![0xffu8, 0x01], QoS::AtLeastOnce, false).await.unwrap();

    let mut streams = Vec::new();
    for ws in [&mut a, &mut b] {
        let frames = until(ws, |f| f["topic"] == "home/blob").await;
        let seqs: Vec<u64> = frames.iter().map(|f| f["seq"].as_u64().unwrap()).collect();
        assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
        let payloads: Vec<String> = frames[..20].iter().map(|f| f["payload"].as_str().unwrap().to_owned()).collect();
        assert_eq!(payloads, (0..20).map(|i| i.to_string()).collect::<Vec<_>>());
        let blob = frames.last().unwrap();
        assert_eq!((blob["binary"].as_bool(), blob["payload"].as_str()), (Some(true), Some("/wE=")));
        streams.push(frames);
    }
    assert_eq!(streams[0], streams[1]);

    gw.shutdown().await;
    broker.shutdown().await.unwrap();
}

#[tokio::test]
async fn malformed_frames_get_error_replies() {
    let broker = broker_at("127.0.0.1:0").await;
    let gw = gateway(&broker.local_addr().to_string(), None).await;
    let mut ws = dashboard(gw.local_addr()).await;
    snapshot(&mut ws).await;

    ws.send(Message::Text("not json".into())).await.unwrap();
    let e = reply(&mut ws).await;
    assert_eq!((e["type"].as_str(), e["seq"].is_null()), (Some("error"), true));

    command(&mut ws, json!({"seq": 12, "action": "explode"})).await;
    let e = reply(&mut ws).await;
    assert_eq!((e["type"].as_str(), e["seq"].as_u64()), (Some("error"), Some(12)));

    ws.send(Message::Binary(vec![1u8, 2].into())).await.unwrap();
    assert_eq!(reply(&mut ws).await["type"], "error");

    // still usable
    command(&mut ws, json!({"seq": 13, "action": "publish", "topic": "patient/notify/5", "payload": "{}"})).await;
    let ack = reply(&mut ws).await;
    assert_eq!((ack["type"].as_str(), ack["seq"].as_u64()), (Some("ack"), Some(13)));

    gw.shutdown().await;
    broker.shutdown().await.unwrap();
}

#[tokio::test]
async fn sensors_are_not_writable() {
    let broker = broker_at("127.0.0.1:0").await;
    let addr = broker.local_addr().to_string();
    let (watcher, mut inbound) = Client::connect(ClientConfig::new(&addr, "watcher")).await.unwrap();
    watcher.subscribe(&[("home/#", QoS::AtLeastOnce)]).await.unwrap();

    let gw = gateway(&addr, None).await;
    let mut ws = dashboard(gw.local_addr()).await;
    snapshot(&mut ws).await;
    for (seq, topic) in [(1, "home/kitchen/flame"), (2, "home/kitchen/flame/set"), (3, "home/#"), (4, "patient/confirm")] {
        command(&mut ws, json!({"seq": seq, "action": "publish", "topic": topic, "payload": "1"})).await;
        let e = reply(&mut ws).await;
        assert_eq!((e["type"].as_str(), e["seq"].as_u64()), (Some("error"), Some(seq)), "{topic}");
    }
    tokio::time::sleep(Duration::from_millis(200)).await;
    assert!(inbound.try_recv().is_none());

    gw.shutdown().await;
    broker.shutdown().await.unwrap();
}

#[tokio::test]
async fn drawer_command_drives_the_medication_scenario() {
    let broker = broker_at("127.0.0.1:0").await;
    let addr = broker.local_addr().to_string();
    let epoch = Instant::now();
    let fleet = FleetRunner::start(Fleet::new(Topology::default_topology()), &addr, "dev-", epoch)
        .await
        .unwrap();
    let engine = EngineRunner::start(RuleEngine::new(RuleSet::default_rules()), &addr, "engine", epoch)
        .await
        .unwrap();
    let gw = gateway(&addr, None).await;
    wait_until(|| gw.hub().attach().0.len() == 8).await;

    let mut ws = dashboard(gw.local_addr()).await;
    let snap = snapshot(&mut ws).await;
    assert_eq!(snap.len(), 8);
    let drawer = snap.iter().find(|f| f["topic"] == "home/bedroom/drawer_relay").unwrap();
    assert_eq!(drawer["payload"], "0");

    command(
        &mut ws,
        json!({"seq": 1, "action": "publish", "topic": "home/bedroom/drawer_relay/set", "payload": "1"}),
    )
    .await;
    let frames = until(&mut ws, |f| f["payload"].as_str().is_some_and(|p| p.contains("medication_time"))).await;
    let ack = frames.iter().find(|f| f["type"] == "ack").expect("ack before the reminder");
    assert_eq!(ack["seq"], 1);
    let state = frames
        .iter()
        .position(|f| f["topic"] == "home/bedroom/drawer_relay" && f["payload"] == "1")
        .expect("confirmed state event");
    let pills = frames
        .iter()
        .position(|f| f["payload"].as_str().is_some_and(|p| p.contains("\"pills\"")))
        .expect("pills notification");
    assert!(state < pills);

    gw.shutdown().await;
    engine.shutdown().await;
    fleet.shutdown().await;
    broker.shutdown().await.unwrap();
}

#[tokio::test]
async fn manual_reminder_reaches_patient() {
    let broker = broker_at("127.0.0.1:0").await;
    let addr = broker.local_addr().to_string();
    let agent = AgentRunner::start(
        PatientAgent::new(RenderCosts::ZERO),
        ClientConfig::new(&addr, "patient"),
        Instant::now(),
    )
    .await
    .unwrap();
    let mut renders = agent.renders();
    let gw = gateway(&addr, None).await;
    let mut ws = dashboard(gw.local_addr()).await;
    snapshot(&mut ws).await;

    command(&mut ws, json!({"seq": 7, "action": "notify", "modality": "audio", "asset": "medication_time"})).await;
    let ack = reply(&mut ws).await;
    assert_eq!(ack["type"], "ack");
    let id = ack["notif_id"].as_u64().unwrap();
    assert!(id >= GATEWAY_NOTIF_BASE);
    assert_eq!(ack["topic"], format!("patient/notify/{id}"));

    let render = tokio::time::timeout(Duration::from_secs(5), renders.recv()).await.unwrap().unwrap();
    assert_eq!((render.notif_id, render.asset_ref.as_str()), (id, "medication_time"));

    command(&mut ws, json!({"seq": 8, "action": "notify", "modality": "text", "asset": "note", "text": "Drink water"})).await;
    let second = reply(&mut ws).await;
    assert_eq!(second["notif_id"].as_u64(), Some(id + 1));

    gw.shutdown().await;
    agent.shutdown().await;
    broker.shutdown().await.unwrap();
}

#[tokio::test]
async fn health_tracks_the_broker() {
    let broker = broker_at("127.0.0.1:0").await;
    let addr = broker.local_addr().to_string();
    let gw = gateway(&addr, None).await;

    let (code, body) = http_get(gw.local_addr(), "/health").await;
    assert_eq!(code, 200);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap(), json!({"status": "ok", "broker_connected": true}));

    broker.shutdown().await.unwrap();
    wait_until(|| !gw.broker_connected()).await;
    let (code, body) = http_get(gw.local_addr(), "/health").await;
    assert_eq!(code, 503);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["broker_connected"], false);
    match connect_async(format!("ws://{}/events", gw.local_addr())).await {
        Err(tokio_tungstenite::tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), 503),
        other => panic!("expected 503, got {:?}", other.map(|r| r.1.status())),
    }

    let broker = broker_at(&addr).await;
    wait_until(|| gw.broker_connected()).await;
    assert_eq!(http_get(gw.local_addr(), "/health").await.0, 200);

    gw.shutdown().await;
    broker.shutdown().await.unwrap();
}

#[tokio::test]
async fn token_guards_events_and_planner() {
    let broker = broker_at("127.0.0.1:0").await;
    let gw = gateway(&broker.local_addr().to_string(), Some("s3cret")).await;
    let addr = gw.local_addr();

    match connect_async(format!("ws://{addr}/events")).await {
        Err(tokio_tungstenite::tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), 401),
        other => panic!("expected 401, got {:?}", other.map(|r| r.1.status())),
    }
    assert!(connect_async(format!("ws://{addr}/events?token=wrong")).await.is_err());
    let (mut ws, _) = connect_async(format!("ws://{addr}/events?token=s3cret")).await.unwrap();
    snapshot(&mut ws).await;

    assert_eq!(http_get(addr, "/qr-size").await.0, 401);
    assert_eq!(http_get(addr, "/health").await.0, 200);

    gw.shutdown().await;
    broker.shutdown().await.unwrap();
}

#[tokio::test]
async fn qr_planner_passthrough() {
    let broker = broker_at("127.0.0.1:0").await;
    let gw = gateway(&broker.local_addr().to_string(), None).await;

    let (code, body) = http_get(gw.local_addr(), "/qr-size").await;
    assert_eq!(code, 200);
    let report: Value = serde_json::from_str(&body).unwrap();
    assert!((report["result"]["l_min_mm"].as_f64().unwrap() - 25.2).abs() < 0.05);
    assert_eq!(report["reference_claim"], "at least 21*21mm");

    let (_, body) = http_get(gw.local_addr(), "/qr-size?d_scan_mm=250").await;
    let report: Value = serde_json::from_str(&body).unwrap();
    assert!((report["result"]["l_min1_mm"].as_f64().unwrap() - 21.0).abs() < 0.05);

    assert_eq!(http_get(gw.local_addr(), "/qr-size?modules_per_side=30").await.0, 400);

    gw.shutdown().await;
    broker.shutdown().await.unwrap();
}
