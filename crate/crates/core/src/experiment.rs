//! End-to-end experiment harness: an in-process broker + registry stack, a
//! simulated venue with one coordinator, and multi-day scenario replay.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::broker::BrokerConfig;
use crate::clock::{Clock, SystemClock};
use crate::coordinator::DeviceFile;
use crate::flow::Direction;
use crate::hub::{Hub, HubConfig, HubError, RecoveryReport};
use crate::net::{Api, BrokerServer, DeviceHandle, HttpServer, LinkOptions, Node, Request, DEFAULT_WORKERS};
use crate::registry::StubGeocoder;
use crate::sim::{make_test_day_with, DayParams, Scenario, ScenarioError};
use crate::thermal::{PipelineConfig, ThermalFrame};

pub const DAY_MS: u64 = 86_400_000;
/// Timestamp of day 0 in simulations: 2024-01-01T00:00:00Z.
pub const SIM_EPOCH_MS: u64 = 1_704_067_200_000;
pub const SIM_BUSINESS_EMAIL: &str = "operator@sim.example";
const SIM_PASSWORD: &str = "simulation-only";
pub const SIM_ADDRESS: &str = "1 Test Street, Testville";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("registry call {call} failed with {status}: {body}")]
    Api { call: String, status: u16, body: String },
    #[error("stack setup: {0}")]
    Setup(String),
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(io::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Io { context, source }
}

#[derive(Clone)]
pub struct StackConfig {
    /// State directory: whitelist, journal, snapshot and registry store.
    pub dir: PathBuf,
    pub broker_listen: SocketAddr,
    pub http_listen: SocketAddr,
    pub broker: BrokerConfig,
    pub snapshot_interval_ms: u64,
    pub password_iterations: u32,
    pub business_emails: Vec<String>,
    pub clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for StackConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StackConfig").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl StackConfig {
    /// Ephemeral localhost ports, cheap password hashing, one business
    /// account for simulations.
    pub fn local(dir: &Path) -> Self {
        let any = SocketAddr::from(([127, 0, 0, 1], 0));
        Self {
            dir: dir.to_owned(),
            broker_listen: any,
            http_listen: any,
            broker: BrokerConfig::default(),
            snapshot_interval_ms: 60_000,
            password_iterations: 1_000,
            business_emails: vec![SIM_BUSINESS_EMAIL.to_owned()],
            clock: Arc::new(SystemClock),
        }
    }

    pub fn hub_config(&self) -> Result<HubConfig, HubError> {
        let whitelist_path = self.dir.join("whitelist.txt");
        Ok(HubConfig {
            broker: self.broker,
            whitelist: HubConfig::load_whitelist(&whitelist_path)?,
            whitelist_path: Some(whitelist_path),
            journal: Some(self.dir.join("journal.log")),
            snapshot: Some(self.dir.join("snapshot.txt")),
            snapshot_interval_ms: self.snapshot_interval_ms,
            store: Some(self.dir.join("registry.json")),
            password_iterations: self.password_iterations,
            business_emails: self.business_emails.clone(),
            ..HubConfig::default()
        })
    }
}

/// Broker and registry in one process, as the CLI runs them.
#[derive(Debug)]
pub struct LocalStack {
    pub broker: BrokerServer,
    pub http: HttpServer,
    pub api: Arc<Api>,
}

impl LocalStack {
    pub fn start(config: &StackConfig) -> Result<(LocalStack, RecoveryReport), ExperimentError> {
        fs::create_dir_all(&config.dir).map_err(io_ctx(format!("creating {}", config.dir.display())))?;
        let rng = ChaCha8Rng::from_os_rng();
        let (hub, report) = Hub::open(
            config.hub_config()?,
            Box::new(StubGeocoder::builtin()),
            config.clock.clone(),
            Box::new(rng),
        )?;
        let node = Node::new(hub);
        let broker_listener =
            TcpListener::bind(config.broker_listen).map_err(io_ctx(format!("binding {}", config.broker_listen)))?;
        let http_listener =
            TcpListener::bind(config.http_listen).map_err(io_ctx(format!("binding {}", config.http_listen)))?;
        let broker = BrokerServer::spawn(node.clone(), broker_listener).map_err(io_ctx("starting broker"))?;
        let api = Arc::new(Api::new(node));
        let http = HttpServer::spawn(api.clone(), http_listener, DEFAULT_WORKERS).map_err(io_ctx("starting http"))?;
        Ok((LocalStack { broker, http, api }, report))
    }

    pub fn node(&self) -> &Arc<Node> {
        self.api.node()
    }

    pub fn durable_state(&self) -> String {
        self.node().with_hub(|h| h.durable_state())
    }

    /// Graceful stop with a final snapshot.
    pub fn stop(self) -> Result<(), HubError> {
        self.http.shutdown();
        self.broker.shutdown()
    }

    /// Stops without flushing anything, as a crash would.
    pub fn kill(self) {
        self.http.shutdown();
        self.broker.abort();
    }

    /// Calls the API; non-2xx statuses become errors.
    pub fn call(&self, req: Request) -> Result<Value, ExperimentError> {
        let r = self.api.handle(&req);
        if (200..300).contains(&r.status) {
            Ok(r.body)
        } else {
            Err(ExperimentError::Api {
                call: format!("{} {}", req.method, req.url),
                status: r.status,
                body: r.body.to_string(),
            })
        }
    }
}

/// A business venue with one enrolled and associated coordinator.
#[derive(Debug, Clone)]
pub struct Venue {
    pub token: String,
    pub activity_id: String,
    pub device: DeviceFile,
}

fn str_field(v: &Value, key: &str) -> Result<String, ExperimentError> {
    v[key]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| ExperimentError::Setup(format!("response lacks {key}: {v}")))
}

/// Registers the operator, creates an activity, enrolls `device_id` and
/// associates it with an OTP, all through the public API.
pub fn set_up_venue(stack: &LocalStack, device_id: &str, sensor_ids: &[String]) -> Result<Venue, ExperimentError> {
    let creds = json!({ "email": SIM_BUSINESS_EMAIL, "password": SIM_PASSWORD });
    stack.call(Request::new("POST", "/auth/register").json(&creds))?;
    let token = str_field(&stack.call(Request::new("POST", "/auth/login").json(&creds))?, "token")?;
    let activity = stack.call(
        Request::new("POST", "/activities")
            .bearer(&token)
            .json(&json!({ "name": "Simulated venue", "address": SIM_ADDRESS, "capacity": 200 })),
    )?;
    let activity_id = str_field(&activity, "activity_id")?;
    let key = stack
        .node()
        .with_hub(|h| h.enroll_device(device_id, crate::broker::DEFAULT_DEVICE_TYPE))
        .map_err(|e| ExperimentError::Setup(e.to_string()))?;
    let otp = str_field(
        &stack.call(Request::new("POST", &format!("/activities/{activity_id}/otp")).bearer(&token))?,
        "otp",
    )?;
    stack.call(Request::new("POST", "/devices/associate").json(&json!({ "device_id": device_id, "otp": otp })))?;
    let device = DeviceFile {
        device_id: device_id.to_owned(),
        device_key: key.to_hex(),
        broker: stack.broker.local_addr().to_string(),
        sensors: sensor_ids
            .iter()
            .map(|id| crate::coordinator::SensorSpec {
                id: id.clone(),
                coverage: "main door".into(),
            })
            .collect(),
    };
    Ok(Venue {
        token,
        activity_id,
        device,
    })
}

fn default_seed() -> u64 {
    42
}
fn default_days() -> u32 {
    1
}
fn default_mean_passes() -> f64 {
    42.0
}
fn default_noise() -> f64 {
    0.3
}
fn default_day_length() -> f64 {
    DayParams::default().day_length_s
}
fn default_headway() -> f64 {
    DayParams::default().min_headway_s
}
fn default_device() -> String {
    "door-1".into()
}
fn default_sensor() -> String {
    "door-1-main".into()
}
fn default_output() -> PathBuf {
    PathBuf::from("sim-out")
}
fn default_ack_timeout() -> f64 {
    60.0
}

/// What `flowmon simulate` runs. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_days")]
    pub days: u32,
    /// Mean of the Poisson-distributed daily pass count.
    #[serde(default = "default_mean_passes")]
    pub mean_passes: f64,
    /// Exact daily pass count, overriding `mean_passes`.
    #[serde(default)]
    pub passes: Option<u32>,
    #[serde(default = "default_noise")]
    pub noise_sigma_c: f64,
    #[serde(default = "default_day_length")]
    pub day_length_s: f64,
    #[serde(default = "default_headway")]
    pub min_headway_s: f64,
    /// Pre-generated scenario files, one per day. Replaces generation.
    #[serde(default)]
    pub scenarios: Vec<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_device")]
    pub device_id: String,
    #[serde(default = "default_sensor")]
    pub sensor_id: String,
    #[serde(default)]
    pub dump_frames: bool,
    /// How long to wait for the broker to acknowledge a day's deltas.
    #[serde(default = "default_ack_timeout")]
    pub ack_timeout_s: f64,
}

impl Default for RunManifest {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Manifest(e.to_string()))
    }

    /// Loads a manifest and checks that every referenced path resolves.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_ctx(format!("reading {}", path.display())))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.output_dir = base.join(&m.output_dir);
        for s in &mut m.scenarios {
            *s = base.join(&*s);
            if !s.is_file() {
                return Err(ExperimentError::Manifest(format!("scenario {} not found", s.display())));
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Manifest(m.to_owned()));
        if self.scenarios.is_empty() && self.days == 0 {
            return bad("days must be at least 1");
        }
        if !(self.mean_passes >= 0.0 && self.mean_passes.is_finite()) {
            return bad("mean_passes must be non-negative");
        }
        if !(self.ack_timeout_s > 0.0) {
            return bad("ack_timeout_s must be positive");
        }
        for id in [&self.device_id, &self.sensor_id] {
            if !crate::thermal::is_valid_id(id) {
                return Err(ExperimentError::Manifest(format!("invalid id {id:?}")));
            }
        }
        Ok(())
    }

    /// The day scenarios, each shifted to start on its own calendar day.
    pub fn day_scenarios(&self) -> Result<Vec<Scenario>, ExperimentError> {
        let start = |i: usize| SIM_EPOCH_MS + i as u64 * DAY_MS;
        if !self.scenarios.is_empty() {
            return self
                .scenarios
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let text = fs::read_to_string(p).map_err(io_ctx(format!("reading {}", p.display())))?;
                    let mut s = Scenario::from_toml(&text)?;
                    s.start_ms = start(i);
                    Ok(s)
                })
                .collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let poisson = (self.mean_passes > 0.0).then(|| Poisson::new(self.mean_passes).expect("validated mean"));
        Ok((0..self.days as usize)
            .map(|i| {
                let drawn = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as u32);
                let passes = self.passes.unwrap_or(drawn);
                let params = DayParams {
                    day_length_s: self.day_length_s,
                    min_headway_s: self.min_headway_s,
                    noise_sigma_c: self.noise_sigma_c,
                    start_ms: start(i),
                    ..DayParams::default()
                };
                make_test_day_with(passes, rng.random(), &params)
            })
            .collect())
    }
}

/// One simulated day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day_index: u32,
    pub true_passes: u32,
    pub true_entries: u32,
    pub true_exits: u32,
    pub detected: u32,
    pub detected_entries: u32,
    pub detected_exits: u32,
    /// Registry occupancy before and after the day.
    pub occupancy_start: u64,
    pub occupancy_end: u64,
    /// Exits the registry could not apply because occupancy was already 0.
    pub underflow: u64,
    /// |occupancy_end - occupancy_start|: the day's error against a
    /// balanced ground truth.
    pub drift: u64,
}

impl DayRecord {
    /// Detected net flow equals the registry's change, underflows included.
    pub fn accounts(&self) -> bool {
        self.detected_entries as i64 - self.detected_exits as i64
            == self.occupancy_end as i64 - self.occupancy_start as i64 - self.underflow as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub days_planned: u32,
    pub days_completed: u32,
    pub complete: bool,
    pub max_drift: u64,
    pub median_drift: f64,
    pub total_true_passes: u64,
    pub total_detected: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub days: Vec<DayRecord>,
    pub summary: Summary,
}

pub fn median(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

impl Report {
    fn new(days_planned: u32, days: Vec<DayRecord>, error: Option<String>) -> Self {
        let drifts: Vec<u64> = days.iter().map(|d| d.drift).collect();
        let summary = Summary {
            days_planned,
            days_completed: days.len() as u32,
            complete: error.is_none() && days.len() as u32 == days_planned,
            max_drift: drifts.iter().copied().max().unwrap_or(0),
            median_drift: median(&drifts),
            total_true_passes: days.iter().map(|d| d.true_passes as u64).sum(),
            total_detected: days.iter().map(|d| d.detected as u64).sum(),
            error,
        };
        Report { days, summary }
    }

    /// One JSON object per line: `{"record":"day",...}` for each day, then
    /// a final `{"record":"summary",...}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.days {
            let mut v = serde_json::to_value(d).expect("records serialize");
            v.as_object_mut().expect("struct").insert("record".into(), "day".into());
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let mut v = serde_json::to_value(&self.summary).expect("summary serializes");
        v.as_object_mut().expect("struct").insert("record".into(), "summary".into());
        out.push_str(&v.to_string());
        out.push('\n');
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>4} {:>6} {:>9} {:>8} {:>7} {:>6} {:>6} {:>10} {:>6}\n",
            "day", "passes", "detected", "entries", "exits", "start", "end", "underflow", "drift"
        );
        for d in &self.days {
            out.push_str(&format!(
                "{:>4} {:>6} {:>9} {:>8} {:>7} {:>6} {:>6} {:>10} {:>6}\n",
                d.day_index,
                d.true_passes,
                d.detected,
                d.detected_entries,
                d.detected_exits,
                d.occupancy_start,
                d.occupancy_end,
                d.underflow,
                d.drift
            ));
        }
        let s = &self.summary;
        out.push_str(&format!(
            "days {}/{}  max drift {}  median drift {}  passes {}  detected {}{}\n",
            s.days_completed,
            s.days_planned,
            s.max_drift,
            s.median_drift,
            s.total_true_passes,
            s.total_detected,
            if s.complete { "" } else { "  INCOMPLETE" }
        ));
        if let Some(e) = &s.error {
            out.push_str(&format!("error: {e}\n"));
        }
        out
    }
}

struct Outputs {
    events: BufWriter<File>,
    frames: Option<BufWriter<File>>,
}

impl Outputs {
    fn create(dir: &Path, frames: bool) -> Result<Self, ExperimentError> {
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(io_ctx(format!("creating {}", p.display())))
        };
        Ok(Self {
            events: open("events.log")?,
            frames: if frames { Some(open("frames.log")?) } else { None },
        })
    }
}

fn occupancy_of(stack: &LocalStack, venue: &Venue) -> Result<(u64, u64), ExperimentError> {
    let d = stack.call(Request::new("GET", &format!("/activities/{}", venue.activity_id)).bearer(&venue.token))?;
    let occ = d["occupancy"].as_u64().unwrap_or(0);
    let underflow = d["owner"]["anomaly_underflow"].as_u64().unwrap_or(0);
    Ok((occ, underflow))
}

/// Runs every day of the manifest end to end and writes `report.jsonl`,
/// `report.txt` and `events.log` (plus `frames.log` when asked) to the
/// output directory. State from earlier runs in that directory is
/// discarded, so a manifest always reproduces the same report.
///
/// Failures after setup end the run early; the report then says
/// `complete: false` and carries the error.
pub fn run(manifest: &RunManifest) -> Result<Report, ExperimentError> {
    manifest.validate()?;
    let scenarios = manifest.day_scenarios()?;
    let out = &manifest.output_dir;
    let state = out.join("state");
    if state.exists() {
        fs::remove_dir_all(&state).map_err(io_ctx(format!("clearing {}", state.display())))?;
    }
    fs::create_dir_all(&state).map_err(io_ctx(format!("creating {}", state.display())))?;
    let mut outputs = Outputs::create(out, manifest.dump_frames)?;

    let (stack, _) = LocalStack::start(&StackConfig::local(&state))?;
    let venue = set_up_venue(&stack, &manifest.device_id, std::slice::from_ref(&manifest.sensor_id))?;
    venue
        .device
        .save(&out.join("device.toml"))
        .map_err(|e| ExperimentError::Setup(e.to_string()))?;
    let device = DeviceHandle::start(LinkOptions::new(venue.device.clone()))
        .map_err(|e| ExperimentError::Setup(e.to_string()))?;

    let mut days = Vec::new();
    let result = replay_days(manifest, &scenarios, &stack, &venue, &device, &mut outputs, &mut days);
    let error = result.err().map(|e| e.to_string());
    device.stop();
    stack.stop()?;

    let report = Report::new(scenarios.len() as u32, days, error);
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        fs::write(&p, text).map_err(io_ctx(format!("writing {}", p.display())))
    };
    write("report.jsonl", &report.to_jsonl())?;
    write("report.txt", &report.to_table())?;
    Ok(report)
}

fn replay_days(
    manifest: &RunManifest,
    scenarios: &[Scenario],
    stack: &LocalStack,
    venue: &Venue,
    device: &DeviceHandle,
    outputs: &mut Outputs,
    days: &mut Vec<DayRecord>,
) -> Result<(), ExperimentError> {
    let timeout = Duration::from_secs_f64(manifest.ack_timeout_s);
    let location = Some(venue.activity_id.clone());
    let config = match device.wait_for(timeout, |s| s.config.as_ref().is_some_and(|c| c.location_id == location)) {
        Some(s) if s.error.is_none() => s.config.expect("waited for it"),
        Some(s) => return Err(ExperimentError::Setup(format!("coordinator failed: {}", s.error.expect("checked")))),
        None => return Err(ExperimentError::Setup("coordinator did not provision in time".into())),
    };
    let mut ingestor = device
        .ingestor(PipelineConfig {
            delta_threshold: config.delta_threshold(),
        })
        .map_err(|e| ExperimentError::Setup(e.to_string()))?;

    let mut seq_offset = 0;
    for (i, scenario) in scenarios.iter().enumerate() {
        let (occupancy_start, underflow_start) = occupancy_of(stack, venue)?;
        let truth = scenario.true_events();
        let mut rec = DayRecord {
            day_index: i as u32,
            true_passes: truth.len() as u32,
            true_entries: truth.iter().filter(|e| e.direction == Direction::Entry).count() as u32,
            true_exits: truth.iter().filter(|e| e.direction == Direction::Exit).count() as u32,
            detected: 0,
            detected_entries: 0,
            detected_exits: 0,
            occupancy_start,
            occupancy_end: 0,
            underflow: 0,
            drift: 0,
        };
        for (frame, _) in scenario.render(&manifest.sensor_id)? {
            // Meter sequence numbers continue across days.
            let frame = ThermalFrame::new(
                frame.sensor_id(),
                seq_offset + frame.seq(),
                frame.timestamp_ms(),
                *frame.cells(),
            )
            .expect("re-sequencing keeps the frame valid");
            if let Some(w) = outputs.frames.as_mut() {
                writeln!(w, "{frame}").map_err(io_ctx("writing frames"))?;
            }
            let events = ingestor
                .on_frame(&frame)
                .map_err(|e| ExperimentError::Setup(e.to_string()))?;
            for e in events {
                writeln!(outputs.events, "{e}").map_err(io_ctx("writing events"))?;
                rec.detected += 1;
                match e.direction {
                    Direction::Entry => rec.detected_entries += 1,
                    Direction::Exit => rec.detected_exits += 1,
                }
            }
        }
        seq_offset += scenario.frame_count();
        outputs.events.flush().map_err(io_ctx("writing events"))?;

        let waited = Instant::now();
        if !device.wait_idle(timeout) {
            let why = device
                .status()
                .error
                .map_or_else(|| format!("deltas unacknowledged after {:?}", waited.elapsed()), |e| e.to_string());
            return Err(ExperimentError::Setup(format!("day {i}: {why}")));
        }
        let (occupancy_end, underflow_end) = occupancy_of(stack, venue)?;
        rec.occupancy_end = occupancy_end;
        rec.underflow = underflow_end - underflow_start;
        rec.drift = occupancy_end.abs_diff(occupancy_start);
        tracing::info!(day = i, drift = rec.drift, detected = rec.detected, "day complete");
        days.push(rec);
    }
    if let Some(w) = outputs.frames.as_mut() {
        w.flush().map_err(io_ctx("writing frames"))?;
    }
    Ok(())
}
