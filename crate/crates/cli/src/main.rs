use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aal_core::bench::{export_csv, run_trials, BenchConfig, BrokerTarget, TrialKind};
use aal_core::devices::{Fleet, FleetRunner, KindRegistry, Topology};
use aal_core::patient::{AgentRunner, PatientAgent, ScanOutcome};
use aal_core::qr::{QrReport, QrSizingInput, ScanConditions, GOLDEN_RATIO};
use aal_core::rules::{EngineRunner, PredicateRegistry, RuleEngine, RuleSet};
use aal_core::scenario::{run_scenario, DEFAULT_SCRIPT};
use aal_core::script::{parse_script, ScriptAction, ScriptEvent};
use aal_core::RenderCosts;
use aal_gateway::{Gateway, GatewayConfig};
use aal_mqtt::{BrokerConfig, BrokerServer, Client, ClientConfig, QoS, ServerConfig};
use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use tokio::io::{AsyncBufReadExt, BufReader};
use tracing_subscriber::EnvFilter;

type CliResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "aal", version, about = "Home-care MQTT broker, simulators and tools")]
struct Cli {
    /// Log filter, e.g. `info` or `aal_mqtt=debug`. Defaults to `info`,
    /// or `warn` for the virtual-time commands.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the MQTT broker.
    Broker {
        #[arg(long, default_value_t = 1883)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        #[arg(long, default_value_t = BrokerConfig::default().max_packet_bytes)]
        max_packet_bytes: usize,
        #[arg(long, default_value_t = BrokerConfig::default().offline_queue_cap)]
        offline_queue_cap: usize,
        /// Session and retained state survive restarts through this file.
        #[arg(long)]
        snapshot_path: Option<PathBuf>,
    },
    /// Run the simulated device fleet.
    Devices {
        /// Topology file; the built-in home when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:1883")]
        broker: String,
        #[arg(long, value_enum, default_value_t = Mode::Wall)]
        mode: Mode,
        /// Event script (`<ms> <device_id> <value>` or `<ms> set:<device_id> <value>`).
        #[arg(long)]
        script: Option<PathBuf>,
        /// Exit once the script has played instead of waiting for Ctrl-C.
        #[arg(long)]
        once: bool,
    },
    /// Run the rule engine.
    Rules {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:1883")]
        broker: String,
        #[arg(long, default_value = "rule-engine")]
        client_id: String,
    },
    /// Run the patient agent; reads `scan`, `confirm`, `history` and `quit` from stdin.
    Patient {
        #[arg(long, default_value = "127.0.0.1:1883")]
        broker: String,
        #[arg(long, default_value = "patient")]
        client_id: String,
        /// Keep the broker session (and queued notifications) across disconnects.
        #[arg(long)]
        persistent: bool,
        /// Render costs in milliseconds as `audio,image`.
        #[arg(long, value_parser = parse_costs, default_value = "364,106")]
        render_costs: RenderCosts,
        /// Write the render log here as JSON lines on exit.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Minimum printable QR code size.
    QrSize(QrArgs),
    /// End-to-end notification latency trials.
    Bench {
        #[arg(long)]
        kind: TrialKind,
        #[arg(long, default_value_t = 50)]
        n: u32,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the statistics as JSON.
        #[arg(long)]
        report_json: Option<PathBuf>,
        /// Use a running broker instead of an in-process one.
        #[arg(long)]
        broker: Option<String>,
        #[arg(long, value_parser = parse_costs, default_value = "364,106")]
        render_costs: RenderCosts,
        #[arg(long, default_value_t = 10)]
        timeout_s: u64,
    },
    /// Bridge the broker to dashboards over WebSocket.
    Gateway {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "127.0.0.1:1883")]
        broker: String,
        #[arg(long)]
        token: Option<String>,
        /// Topology that defines the writable actuator topics.
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Replay an event script against the whole system in virtual time.
    Scenario {
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Built-in demo script when omitted.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, value_parser = parse_costs, default_value = "364,106")]
        render_costs: RenderCosts,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Replay the script instantly in simulated time, printing the trace.
    Virtual,
    /// Connect to the broker and play the script in real time.
    Wall,
}

#[derive(clap::Args)]
struct QrArgs {
    #[arg(long, default_value_t = 300.0)]
    d_scan_mm: f64,
    #[arg(long)]
    poor_lighting: bool,
    #[arg(long)]
    mid_light_colored_code: bool,
    #[arg(long)]
    not_front_on: bool,
    #[arg(long, default_value_t = 21)]
    modules_per_side: u32,
    #[arg(long, default_value_t = 10)]
    pixels_per_module: u32,
    #[arg(long, default_value_t = 340.0)]
    fov_mm: f64,
    #[arg(long, default_value_t = 12_000_000.0)]
    resolution_pixels: f64,
    #[arg(long, default_value_t = GOLDEN_RATIO)]
    aspect_phi: f64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn parse_costs(s: &str) -> Result<RenderCosts, String> {
    let (a, i) = s.split_once(',').ok_or("expected audio_ms,image_ms")?;
    let ms = |v: &str| {
        v.trim()
            .parse::<u64>()
            .map(Duration::from_millis)
            .map_err(|e| format!("{v:?}: {e}"))
    };
    Ok(RenderCosts {
        audio: ms(a)?,
        image: ms(i)?,
    })
}

fn load_topology(path: Option<&Path>) -> Result<Topology, Box<dyn std::error::Error>> {
    Ok(match path {
        Some(p) => Topology::load(p, &KindRegistry::builtin())?,
        None => Topology::default_topology(),
    })
}

fn load_rules(path: Option<&Path>) -> Result<RuleSet, Box<dyn std::error::Error>> {
    Ok(match path {
        Some(p) => RuleSet::load(p, &PredicateRegistry::builtin())?,
        None => RuleSet::default_rules(),
    })
}

fn load_script(path: Option<&Path>) -> Result<Vec<ScriptEvent>, Box<dyn std::error::Error>> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => DEFAULT_SCRIPT.to_owned(),
    };
    Ok(parse_script(&text)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = matches!(
        cli.command,
        Command::Scenario { .. } | Command::QrSize(_) | Command::Devices { mode: Mode::Virtual, .. }
    );
    let level = cli
        .log_level
        .unwrap_or_else(|| if quiet { "warn" } else { "info" }.to_owned());
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&level).unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

async fn run(command: Command) -> CliResult {
    match command {
        Command::Broker {
            port,
            host,
            max_packet_bytes,
            offline_queue_cap,
            snapshot_path,
        } => {
            let mut config = ServerConfig::new(format!("{host}:{port}").parse()?);
            config.broker.max_packet_bytes = max_packet_bytes;
            config.broker.offline_queue_cap = offline_queue_cap;
            config.snapshot_path = snapshot_path;
            let server = BrokerServer::start(config).await?;
            println!("broker listening on {}", server.local_addr());
            tokio::signal::ctrl_c().await?;
            server.shutdown().await?;
            Ok(())
        }
        Command::Devices {
            config,
            broker,
            mode,
            script,
            once,
        } => {
            let topology = load_topology(config.as_deref())?;
            let script = match &script {
                Some(p) => parse_script(&std::fs::read_to_string(p)?)?,
                None => Vec::new(),
            };
            if script
                .iter()
                .any(|e| !matches!(e.action, ScriptAction::Device { .. } | ScriptAction::Command { .. }))
            {
                return Err("device scripts may only contain device and set: lines".into());
            }
            match mode {
                Mode::Virtual => {
                    let rules = RuleSet::parse("", &PredicateRegistry::builtin())?;
                    let outcome = run_scenario(topology, rules, RenderCosts::ZERO, &script)?;
                    print!("{}", outcome.trace_text());
                    Ok(())
                }
                Mode::Wall => devices_wall(topology, &broker, &script, once).await,
            }
        }
        Command::Rules {
            config,
            broker,
            client_id,
        } => {
            let rules = load_rules(config.as_deref())?;
            println!("{} rules loaded", rules.rules.len());
            let engine = EngineRunner::start(RuleEngine::new(rules), &broker, &client_id, Instant::now()).await?;
            let mut printed = 0;
            let mut tick = tokio::time::interval(Duration::from_millis(100));
            loop {
                tokio::select! {
                    _ = tick.tick() => {
                        let emitted = engine.emitted();
                        for (at, e) in &emitted[printed..] {
                            println!("[{:>9.3}s] {e}", at.as_secs_f64());
                        }
                        printed = emitted.len();
                        if !engine.is_connected() {
                            return Err("lost the broker".into());
                        }
                    }
                    _ = tokio::signal::ctrl_c() => break,
                }
            }
            engine.shutdown().await;
            Ok(())
        }
        Command::Patient {
            broker,
            client_id,
            persistent,
            render_costs,
            log,
        } => patient(broker, client_id, persistent, render_costs, log).await,
        Command::QrSize(args) => {
            let input = QrSizingInput {
                d_scan_mm: args.d_scan_mm,
                conditions: ScanConditions {
                    poor_lighting: args.poor_lighting,
                    mid_light_colored_code: args.mid_light_colored_code,
                    not_front_on: args.not_front_on,
                },
                modules_per_side: args.modules_per_side,
                pixels_per_module: args.pixels_per_module,
                fov_mm: args.fov_mm,
                resolution_pixels: args.resolution_pixels,
                aspect_phi: args.aspect_phi,
            };
            let report = QrReport::new(input)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
                if !report.to_string().ends_with('\n') {
                    println!();
                }
            }
            Ok(())
        }
        Command::Bench {
            kind,
            n,
            csv,
            report_json,
            broker,
            render_costs,
            timeout_s,
        } => {
            let mut config = BenchConfig::new(kind, n);
            config.render_costs = render_costs;
            config.timeout = Duration::from_secs(timeout_s);
            if let Some(b) = broker {
                config.broker = BrokerTarget::Remote(b);
            }
            let outcome = run_trials(&config).await;
            if let Some(path) = csv {
                let mut out = BufWriter::new(File::create(&path)?);
                export_csv(&outcome.samples, &mut out)?;
                out.flush()?;
            }
            if let Some(path) = report_json {
                std::fs::write(path, serde_json::to_string_pretty(&outcome.report)?)?;
            }
            println!("{}", outcome.report);
            if outcome.audited_loss != outcome.report.loss_count {
                println!("warning: loss audit found {} missing renders", outcome.audited_loss);
            }
            Ok(())
        }
        Command::Gateway {
            port,
            host,
            broker,
            token,
            topology,
        } => {
            let bind: SocketAddr = format!("{host}:{port}").parse()?;
            let mut config = GatewayConfig::new(bind, broker);
            config.token = token;
            config.topology = load_topology(topology.as_deref())?;
            let gateway = Gateway::start(config).await?;
            println!("gateway listening on {}", gateway.local_addr());
            tokio::signal::ctrl_c().await?;
            gateway.shutdown().await;
            Ok(())
        }
        Command::Scenario {
            topology,
            rules,
            script,
            render_costs,
        } => {
            let outcome = run_scenario(
                load_topology(topology.as_deref())?,
                load_rules(rules.as_deref())?,
                render_costs,
                &load_script(script.as_deref())?,
            )?;
            print!("{}", outcome.trace_text());
            Ok(())
        }
    }
}

async fn devices_wall(topology: Topology, broker: &str, script: &[ScriptEvent], once: bool) -> CliResult {
    let epoch = Instant::now();
    let fleet = Fleet::new(topology);
    let commands: Vec<(String, String)> = fleet
        .specs()
        .filter_map(|s| Some((s.id.clone(), s.command_topic()?)))
        .collect();
    let handle = FleetRunner::start(fleet, broker, "dev-", epoch).await?;
    println!("{} devices connected", handle.with_fleet(|f| f.len()));
    let (operator, _inbound) = Client::connect(ClientConfig::new(broker, "devices-script")).await?;
    for event in script {
        tokio::time::sleep(event.at.saturating_sub(epoch.elapsed())).await;
        match &event.action {
            ScriptAction::Device { device_id, value } => {
                handle.inject(device_id, value).await?;
                println!("[{:>9.3}s] {device_id} = {value}", epoch.elapsed().as_secs_f64());
            }
            ScriptAction::Command { device_id, value } => {
                let topic = commands
                    .iter()
                    .find(|(id, _)| id == device_id)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| format!("{device_id:?} is not an actuator"))?;
                operator.publish_wait(&topic, value.clone(), QoS::AtLeastOnce, false).await?;
                println!("[{:>9.3}s] {topic} <- {value}", epoch.elapsed().as_secs_f64());
            }
            _ => unreachable!("checked before starting"),
        }
    }
    if !once {
        tokio::signal::ctrl_c().await?;
    }
    let _ = operator.disconnect().await;
    handle.shutdown().await;
    Ok(())
}

async fn patient(
    broker: String,
    client_id: String,
    persistent: bool,
    costs: RenderCosts,
    log: Option<PathBuf>,
) -> CliResult {
    let mut config = ClientConfig::new(broker, client_id);
    if persistent {
        config = config.persistent();
    }
    let epoch = Instant::now();
    let agent = AgentRunner::start(PatientAgent::new(costs), config, epoch).await?;
    let mut renders = agent.renders();
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    println!("patient ready; commands: scan <tag> [latency_ms] | confirm [id] | history | quit");
    loop {
        tokio::select! {
            Ok(entry) = renders.recv() => {
                println!(
                    "[{:>9.3}s] render #{} {} {}{}",
                    entry.render_complete_time().as_secs_f64(),
                    entry.notif_id,
                    entry.modality,
                    entry.asset_ref,
                    entry.text.as_deref().map(|t| format!(" {t:?}")).unwrap_or_default(),
                );
            }
            line = lines.next_line() => {
                let Some(line) = line? else { break };
                let words: Vec<&str> = line.split_whitespace().collect();
                match words.as_slice() {
                    ["scan", tag, rest @ ..] => {
                        let latency = match rest.first() {
                            Some(ms) => Duration::from_millis(ms.parse()?),
                            None => Duration::from_millis(rand::thread_rng().gen_range(100..=4000)),
                        };
                        match agent.scan(tag, latency).await {
                            Ok(ScanOutcome::Detected { topic, .. }) => println!("detected {topic} after {latency:?}"),
                            Ok(ScanOutcome::Timeout { .. }) => println!("scan timed out ({latency:?})"),
                            Err(e) => println!("scan failed: {e}"),
                        }
                    }
                    ["confirm", rest @ ..] => {
                        let id = match rest.first() {
                            Some(id) => Some(id.parse()?),
                            None => agent.with_agent(|a| a.latest_confirmable()),
                        };
                        match id {
                            Some(id) => match agent.confirm(id).await {
                                Ok(()) => println!("confirmed #{id}"),
                                Err(e) => println!("confirm failed: {e}"),
                            },
                            None => println!("nothing to confirm"),
                        }
                    }
                    ["history"] => agent.with_agent(|a| {
                        for e in a.history() {
                            println!("#{} {} {}", e.notif_id, e.modality, e.asset_ref);
                        }
                    }),
                    ["quit"] | ["exit"] => break,
                    [] => {}
                    _ => println!("unknown command"),
                }
            }
            _ = tokio::signal::ctrl_c() => break,
        }
    }
    if let Some(path) = log {
        let out = BufWriter::new(File::create(path)?);
        agent.with_agent(|a| a.export_jsonl(out))?;
    }
    agent.shutdown().await;
    Ok(())
}
