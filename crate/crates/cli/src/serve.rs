use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use anyhow::{Context, Result};
use clap::Args;
use flowmon::broker::BrokerConfig;
use flowmon::clock::SystemClock;
use flowmon::hub::{Hub, HubConfig};
use flowmon::net::{Api, BrokerServer, HttpServer, Node, DEFAULT_WORKERS};
use flowmon::registry::{StubGeocoder, DEFAULT_ITERATIONS};
use rand::SeedableRng;

#[derive(Args)]
pub struct StateArgs {
    /// Device whitelist file; created on first rotation or enrollment.
    #[arg(long)]
    whitelist: PathBuf,
    /// Append-only occupancy journal.
    #[arg(long)]
    journal: PathBuf,
    /// Seconds between occupancy snapshots.
    #[arg(long, default_value_t = 60)]
    snapshot_interval: u64,
    /// Snapshot file [default: journal path with `.snapshot`].
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Registry records (users, activities, associations) as JSON
    /// [default: journal path with `.registry.json`].
    #[arg(long)]
    store: Option<PathBuf>,
    /// Email that receives the business role. Repeatable.
    #[arg(long = "business")]
    business: Vec<String>,
    /// PBKDF2 iterations for new password hashes.
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    password_iterations: u32,
}

#[derive(Args)]
pub struct BrokerArgs {
    /// Broker address.
    #[arg(long)]
    listen: SocketAddr,
    /// Also serve the HTTP API here.
    #[arg(long)]
    http: Option<SocketAddr>,
    #[command(flatten)]
    state: StateArgs,
}

#[derive(Args)]
pub struct RegistryArgs {
    /// HTTP API address.
    #[arg(long)]
    listen: SocketAddr,
    /// Address of the co-located broker.
    #[arg(long, default_value = "127.0.0.1:1883")]
    broker_listen: SocketAddr,
    #[command(flatten)]
    state: StateArgs,
}

fn bind(addr: SocketAddr, what: &str) -> Result<TcpListener> {
    TcpListener::bind(addr).with_context(|| format!("cannot listen for {what} on {addr}"))
}

fn hub_config(s: &StateArgs) -> Result<HubConfig> {
    let sidecar = |ext: &str| {
        let mut p = s.journal.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    Ok(HubConfig {
        broker: BrokerConfig::default(),
        whitelist: HubConfig::load_whitelist(&s.whitelist)?,
        whitelist_path: Some(s.whitelist.clone()),
        journal: Some(s.journal.clone()),
        snapshot: Some(s.snapshot.clone().unwrap_or_else(|| sidecar(".snapshot"))),
        snapshot_interval_ms: s.snapshot_interval.saturating_mul(1000),
        store: Some(s.store.clone().unwrap_or_else(|| sidecar(".registry.json"))),
        password_iterations: s.password_iterations,
        business_emails: s.business.clone(),
        ..HubConfig::default()
    })
}

fn serve(state: &StateArgs, broker: TcpListener, http: Option<TcpListener>) -> Result<()> {
    let config = hub_config(state)?;
    let (hub, report) = Hub::open(
        config,
        Box::new(StubGeocoder::builtin()),
        Arc::new(SystemClock),
        Box::new(rand_chacha::ChaCha8Rng::from_os_rng()),
    )?;
    tracing::info!(
        journal_entries = report.journal_entries,
        snapshot_consistent = ?report.snapshot_consistent,
        "state recovered"
    );
    let node = Node::new(hub);
    let broker = BrokerServer::spawn(node.clone(), broker).context("starting broker")?;
    let http = match http {
        Some(l) => Some(HttpServer::spawn(Arc::new(Api::new(node)), l, DEFAULT_WORKERS).context("starting http api")?),
        None => None,
    };
    let http_addr = http.as_ref().map_or("-".to_owned(), |h| h.local_addr().to_string());
    println!("flowmon ready broker={} http={}", broker.local_addr(), http_addr);
    loop {
        thread::park();
    }
}

pub fn run_broker(a: BrokerArgs) -> Result<()> {
    let broker = bind(a.listen, "the broker")?;
    let http = a.http.map(|h| bind(h, "http")).transpose()?;
    serve(&a.state, broker, http)
}

pub fn run_registry(a: RegistryArgs) -> Result<()> {
    let http = bind(a.listen, "http")?;
    let broker = bind(a.broker_listen, "the broker")?;
    serve(&a.state, broker, Some(http))
}
