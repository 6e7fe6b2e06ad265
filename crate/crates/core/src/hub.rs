//! The server process state: broker, occupancy ledger and registry behind
//! one owner, with the interception rules that tie them together.
//!
//! Like the broker engine, the hub performs no network I/O. Broker actions
//! accumulate in an outbox that the transport drains after every call.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{
    Action, ApplyOutcome, Broker, BrokerConfig, ConnId, DeviceKey, HistoryPoint, Inbound, Journal,
    JournalEntry, JournalError, KeyStatus, OccupancyStore, Snapshot, Whitelist, WhitelistError,
};
use crate::clock::Clock;
use crate::coordinator::{config_topic, key_topic, DELTA_THRESHOLD_KEY};
use crate::registry::{
    Activity, ActivityPatch, Geocoder, NewActivity, OtpGrant, PublicActivity, Registry,
    RegistryData, RegistryError, TokenGrant, User, DEFAULT_ITERATIONS,
};
use crate::thermal::DEFAULT_DELTA_THRESHOLD_C;
use crate::topic::{capture_id, TopicName};
use crate::wire::{
    from_payload, to_payload, ConstantsConfig, DeltaPayload, Frame, KeyPayload, LocationConfig,
    OccupancyPayload, RegistryUpdate, TypeConfig, UpdateKind,
};

pub const UPDATES_TOPIC: &str = "registry/updates";
const WHITELIST_POLL_MS: u64 = 500;

#[derive(Debug, Error)]
pub enum HubError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    StoreFormat {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Whitelist {
        path: PathBuf,
        #[source]
        source: WhitelistError,
    },
}

/// Error returned by the registry-facing operations.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApiError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::Registry(e) => e.status(),
            ApiError::Storage(_) => 500,
        }
    }
}

impl From<HubError> for ApiError {
    fn from(e: HubError) -> Self {
        ApiError::Storage(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HubError + '_ {
    move |source| HubError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<(), HubError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn default_constants() -> ConstantsConfig {
    [(DELTA_THRESHOLD_KEY.to_owned(), DEFAULT_DELTA_THRESHOLD_C)].into()
}

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub broker: BrokerConfig,
    pub whitelist: Whitelist,
    /// Whitelist file kept in sync with rotations and watched for edits.
    pub whitelist_path: Option<PathBuf>,
    pub journal: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub snapshot_interval_ms: u64,
    /// Registry records (JSON). In-memory only when absent.
    pub store: Option<PathBuf>,
    pub constants: ConstantsConfig,
    pub password_iterations: u32,
    pub business_emails: Vec<String>,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            broker: BrokerConfig::default(),
            whitelist: Whitelist::new(),
            whitelist_path: None,
            journal: None,
            snapshot: None,
            snapshot_interval_ms: 60_000,
            store: None,
            constants: default_constants(),
            password_iterations: DEFAULT_ITERATIONS,
            business_emails: Vec::new(),
        }
    }
}

impl HubConfig {
    /// Reads a whitelist file; a missing file is an empty whitelist.
    pub fn load_whitelist(path: &Path) -> Result<Whitelist, HubError> {
        match fs::read_to_string(path) {
            Ok(text) => Whitelist::parse(&text).map_err(|source| HubError::Whitelist {
                path: path.to_owned(),
                source,
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Whitelist::new()),
            Err(e) => Err(io_err(path)(e)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub journal_entries: usize,
    /// Whether an on-disk snapshot agreed with the replayed journal.
    pub snapshot_consistent: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HubStats {
    pub deltas_applied: u64,
    pub deltas_duplicate: u64,
    pub deltas_rejected: u64,
    pub handler_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyView {
    pub activity_id: String,
    pub occupancy: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
    pub as_of_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearbyActivity {
    #[serde(flatten)]
    pub activity: PublicActivity,
    pub distance_m: f64,
    pub occupancy: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityDetail {
    #[serde(flatten)]
    pub activity: PublicActivity,
    pub occupancy: u64,
    /// Owner-only fields.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owner: Option<OwnerDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnerDetail {
    pub visibility: crate::registry::Visibility,
    pub devices: Vec<String>,
    pub anomaly_underflow: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceView {
    pub device_id: String,
    pub device_type: String,
    pub online: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    pub device_id: String,
    pub activity_id: String,
}

pub struct Hub {
    broker: Broker,
    occupancy: OccupancyStore,
    journal: Option<Journal>,
    registry: Registry,
    config: HubConfig,
    clock: Arc<dyn Clock>,
    rng: Box<dyn RngCore + Send>,
    outbox: Vec<Action>,
    stats: HubStats,
    last_snapshot_ms: u64,
    last_whitelist_poll_ms: u64,
    whitelist_text: Option<String>,
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub")
            .field("sessions", &self.broker.session_count())
            .field("registry", &self.registry)
            .field("stats", &self.stats)
            .finish()
    }
}

impl Hub {
    /// Loads persisted state and replays the journal.
    pub fn open(
        config: HubConfig,
        geocoder: Box<dyn Geocoder>,
        clock: Arc<dyn Clock>,
        rng: Box<dyn RngCore + Send>,
    ) -> Result<(Hub, RecoveryReport), HubError> {
        let data = match &config.store {
            Some(path) => match fs::read_to_string(path) {
                Ok(text) => serde_json::from_str(&text).map_err(|source| HubError::StoreFormat {
                    path: path.clone(),
                    source,
                })?,
                Err(e) if e.kind() == io::ErrorKind::NotFound => RegistryData::default(),
                Err(e) => return Err(io_err(path)(e)),
            },
            None => RegistryData::default(),
        };
        let mut registry = Registry::from_data(data, geocoder);
        for email in &config.business_emails {
            registry.grant_business(email);
        }

        let mut occupancy = OccupancyStore::new();
        for a in registry.activities() {
            occupancy.add_location(&a.activity_id);
        }
        let mut report = RecoveryReport::default();
        let journal = match &config.journal {
            Some(path) => {
                let (journal, entries) = Journal::open(path)?;
                report.journal_entries = entries.len();
                if let Some(snap_path) = &config.snapshot {
                    if let Some(snap) = Snapshot::read(snap_path)? {
                        let ok = snapshot_matches(&snap, &entries);
                        if !ok {
                            tracing::warn!(path = %snap_path.display(), "snapshot disagrees with journal; trusting the journal");
                        }
                        report.snapshot_consistent = Some(ok);
                    }
                }
                for e in &entries {
                    replay(&mut occupancy, e);
                }
                Some(journal)
            }
            None => None,
        };

        let whitelist_text = config
            .whitelist_path
            .as_ref()
            .and_then(|p| fs::read_to_string(p).ok());
        let now = clock.now_ms();
        let mut hub = Hub {
            broker: Broker::new(config.whitelist.clone(), config.broker),
            occupancy,
            journal,
            registry,
            config,
            clock,
            rng,
            outbox: Vec::new(),
            stats: HubStats::default(),
            last_snapshot_ms: now,
            last_whitelist_poll_ms: now,
            whitelist_text,
        };
        hub.seed_retained();
        hub.persist_registry()?;
        Ok((hub, report))
    }

    /// Fills the retained store so devices can provision before saying hello,
    /// including keys handed out by a rotation still in progress.
    fn seed_retained(&mut self) {
        let devices: Vec<String> = self.broker.whitelist().devices().map(str::to_owned).collect();
        for d in devices {
            self.publish_config(&d);
            let keys = self.broker.whitelist().keys_of(&d);
            let rotating = keys.iter().any(|(_, s)| matches!(s, KeyStatus::Retiring { .. }));
            if let Some((k, _)) = keys.iter().find(|(_, s)| *s == KeyStatus::Active).filter(|_| rotating) {
                self.publish_key(&d, *k);
            }
        }
        self.outbox.clear();
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn take_actions(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.outbox)
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn occupancy(&self) -> &OccupancyStore {
        &self.occupancy
    }

    pub fn stats(&self) -> HubStats {
        self.stats
    }

    pub fn password_iterations(&self) -> u32 {
        self.config.password_iterations
    }

    // ---- broker transport -------------------------------------------------

    pub fn open_conn(&mut self, conn: ConnId) {
        self.broker.open(conn);
    }

    pub fn close_conn(&mut self, conn: ConnId) {
        self.broker.closed(conn);
    }

    /// One received line. Undecodable input ends the session.
    pub fn on_line(&mut self, conn: ConnId, line: &str) {
        match Frame::decode(line) {
            Ok(frame) => self.on_frame(conn, frame),
            Err(e) => {
                let actions = self.broker.on_malformed(conn, &e.to_string());
                self.outbox.extend(actions);
            }
        }
    }

    pub fn on_frame(&mut self, conn: ConnId, frame: Frame) {
        let now = self.now_ms();
        let (actions, inbound) = self.broker.on_frame(conn, frame, now);
        self.outbox.extend(actions);
        if let Some(inbound) = inbound {
            self.intercept(inbound);
        }
        self.sync_whitelist_file();
    }

    fn intercept(&mut self, msg: Inbound) {
        if let Some(device) = capture_id(&msg.topic, "devices", &["hello"]) {
            let device = device.to_owned();
            tracing::info!(device, "hello, sending configuration");
            self.publish_config(&device);
        } else if let Some(location) = capture_id(&msg.topic, "locations", &["delta"]) {
            let location = location.to_owned();
            if let Err(reason) = self.apply_delta(&msg.device_id, &location, &msg.payload) {
                self.stats.handler_failures += 1;
                tracing::warn!(topic = %msg.topic, device = msg.device_id, reason, "delta not applied");
            }
        }
    }

    fn apply_delta(&mut self, device_id: &str, location: &str, payload: &str) -> Result<(), String> {
        let d: DeltaPayload = from_payload(payload).map_err(|e| e.to_string())?;
        if self.registry.device_location(device_id) != Some(location) {
            self.stats.deltas_rejected += 1;
            return Err(format!("device {device_id} is not associated with {location}"));
        }
        if !self.occupancy.contains(location) {
            self.stats.deltas_rejected += 1;
            return Err("unknown location".into());
        }
        if self.occupancy.has_seen(location, &d.sensor_id, d.event_seq) {
            self.stats.deltas_duplicate += 1;
            return Ok(());
        }
        let entry = JournalEntry {
            location_id: location.to_owned(),
            sensor_id: d.sensor_id.clone(),
            event_seq: d.event_seq,
            direction: d.direction,
            timestamp_ms: d.timestamp_ms,
        };
        // Journal first: an event is applied only once it is durable.
        if let Some(j) = self.journal.as_mut() {
            j.append(&entry).map_err(|e| e.to_string())?;
        }
        let outcome = self
            .occupancy
            .apply(location, &d.sensor_id, d.event_seq, d.direction, d.timestamp_ms)
            .map_err(|e| e.to_string())?;
        if let ApplyOutcome::Applied(occupancy) = outcome {
            self.stats.deltas_applied += 1;
            let topic = TopicName::parse(&format!("locations/{location}/occupancy")).expect("valid location id");
            let body = to_payload(&OccupancyPayload {
                location_id: location.to_owned(),
                occupancy,
                timestamp_ms: d.timestamp_ms,
            });
            let now = self.now_ms();
            let actions = self.broker.publish(&topic, &body, 0, now);
            self.outbox.extend(actions);
        }
        Ok(())
    }

    fn publish_raw(&mut self, topic: &str, payload: String, qos: u8) {
        let topic = TopicName::parse(topic).expect("server topics are valid");
        let now = self.now_ms();
        let actions = self.broker.publish(&topic, &payload, qos, now);
        self.outbox.extend(actions);
    }

    /// Publishes the three configuration messages of a device.
    fn publish_config(&mut self, device_id: &str) {
        let device_type = self
            .broker
            .whitelist()
            .device_type(device_id)
            .unwrap_or(crate::broker::DEFAULT_DEVICE_TYPE)
            .to_owned();
        let location_id = self.registry.device_location(device_id).map(str::to_owned);
        let activity_name = location_id
            .as_deref()
            .and_then(|l| self.registry.activity(l))
            .map(|a| a.name.clone());
        self.publish_raw(&config_topic(device_id, "type"), to_payload(&TypeConfig { device_type }), 1);
        self.publish_raw(
            &config_topic(device_id, "location"),
            to_payload(&LocationConfig {
                location_id,
                activity_name,
            }),
            1,
        );
        let constants = self.config.constants.clone();
        self.publish_raw(&config_topic(device_id, "constants"), to_payload(&constants), 1);
    }

    fn publish_location(&mut self, device_id: &str) {
        let location_id = self.registry.device_location(device_id).map(str::to_owned);
        let activity_name = location_id
            .as_deref()
            .and_then(|l| self.registry.activity(l))
            .map(|a| a.name.clone());
        self.publish_raw(
            &config_topic(device_id, "location"),
            to_payload(&LocationConfig {
                location_id,
                activity_name,
            }),
            1,
        );
    }

    fn publish_key(&mut self, device_id: &str, key: DeviceKey) {
        self.publish_raw(
            &key_topic(device_id),
            to_payload(&KeyPayload {
                device_id: device_id.to_owned(),
                key: key.to_hex(),
            }),
            1,
        );
    }

    fn notify(&mut self, kind: UpdateKind, activity_id: &str, device_id: Option<&str>) {
        let body = to_payload(&RegistryUpdate {
            kind,
            activity_id: activity_id.to_owned(),
            device_id: device_id.map(str::to_owned),
        });
        self.publish_raw(UPDATES_TOPIC, body, 1);
    }

    /// Periodic housekeeping: retransmissions, key expiry, whitelist file
    /// edits and snapshots.
    pub fn tick(&mut self) {
        let now = self.now_ms();
        let actions = self.broker.tick(now);
        self.outbox.extend(actions);
        if now >= self.last_whitelist_poll_ms + WHITELIST_POLL_MS {
            self.last_whitelist_poll_ms = now;
            self.reload_whitelist_file();
        }
        self.sync_whitelist_file();
        if self.config.snapshot.is_some() && now >= self.last_snapshot_ms + self.config.snapshot_interval_ms {
            if let Err(e) = self.write_snapshot() {
                tracing::error!(error = %e, "snapshot failed");
            }
        }
    }

    fn sync_whitelist_file(&mut self) {
        if !self.broker.take_whitelist_dirty() {
            return;
        }
        let Some(path) = self.config.whitelist_path.clone() else {
            return;
        };
        let text = self.broker.whitelist().to_text();
        match write_atomic(&path, &text) {
            Ok(()) => self.whitelist_text = Some(text),
            Err(e) => tracing::error!(error = %e, "could not save whitelist"),
        }
    }

    fn reload_whitelist_file(&mut self) {
        let Some(path) = self.config.whitelist_path.clone() else {
            return;
        };
        let Ok(text) = fs::read_to_string(&path) else {
            return;
        };
        if self.whitelist_text.as_deref() == Some(text.as_str()) {
            return;
        }
        match Whitelist::parse(&text) {
            Ok(wl) => {
                tracing::info!(path = %path.display(), "whitelist changed on disk, reloading");
                let known: Vec<String> = self.broker.whitelist().devices().map(str::to_owned).collect();
                let actions = self.broker.replace_whitelist(wl);
                self.outbox.extend(actions);
                let added: Vec<String> = self
                    .broker
                    .whitelist()
                    .devices()
                    .filter(|d| !known.iter().any(|k| k == d))
                    .map(str::to_owned)
                    .collect();
                for d in added {
                    self.publish_config(&d);
                }
            }
            Err(e) => tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable whitelist edit"),
        }
        self.whitelist_text = Some(text);
    }

    /// Writes a snapshot now.
    pub fn write_snapshot(&mut self) -> Result<(), HubError> {
        self.last_snapshot_ms = self.now_ms();
        let (Some(path), Some(journal)) = (&self.config.snapshot, &self.journal) else {
            return Ok(());
        };
        let snap = Snapshot {
            journal_lines: journal.lines(),
            locations: self
                .occupancy
                .states()
                .into_iter()
                .map(|s| (s.location_id, s.occupancy, s.as_of_ms))
                .collect(),
        };
        snap.write(path)?;
        Ok(())
    }

    /// Graceful shutdown: final snapshot.
    pub fn flush(&mut self) -> Result<(), HubError> {
        self.sync_whitelist_file();
        self.write_snapshot()
    }

    /// Canonical text of everything that must survive a crash: occupancy
    /// per location and device associations.
    pub fn durable_state(&self) -> String {
        let mut out = String::from("# location occupancy as_of_ms anomaly_underflow\n");
        for s in self.occupancy.states() {
            out.push_str(&format!("{} {} {} {}\n", s.location_id, s.occupancy, s.as_of_ms, s.anomaly_underflow));
        }
        out.push_str("# device activity\n");
        for (d, a) in &self.registry.data().associations {
            out.push_str(&format!("{d} {a}\n"));
        }
        out
    }

    fn persist_registry(&self) -> Result<(), HubError> {
        let Some(path) = &self.config.store else {
            return Ok(());
        };
        let text = serde_json::to_string_pretty(self.registry.data()).expect("registry serializes");
        write_atomic(path, &text)
    }

    // ---- registry operations -----------------------------------------------

    pub fn email_taken(&self, email: &str) -> bool {
        self.registry.email_taken(email)
    }

    pub fn credentials(&self, email: &str) -> Option<(String, String)> {
        self.registry.credentials(email)
    }

    /// Stores a new user; the password is hashed by the caller, outside any lock.
    pub fn add_user(&mut self, email: &str, password_hash: String) -> Result<User, ApiError> {
        let user = self.registry.add_user(email, password_hash)?;
        self.persist_registry()?;
        Ok(user)
    }

    pub fn issue_token(&mut self, user_id: &str) -> Result<TokenGrant, ApiError> {
        let now = self.now_ms();
        Ok(self.registry.issue_token(user_id, now, &mut *self.rng)?)
    }

    fn viewer(&self, token: Option<&str>) -> Result<Option<String>, ApiError> {
        match token {
            Some(t) => Ok(Some(self.registry.user_for_token(t, self.now_ms())?.user_id.clone())),
            None => Ok(None),
        }
    }

    fn business(&self, token: Option<&str>) -> Result<String, ApiError> {
        let token = token.ok_or_else(|| RegistryError::Unauthorized("missing token".into()))?;
        Ok(self.registry.business_user(token, self.now_ms())?.user_id.clone())
    }

    pub fn create_activity(&mut self, token: Option<&str>, req: NewActivity) -> Result<Activity, ApiError> {
        let owner = self.business(token)?;
        let a = self.registry.create_activity(&owner, req)?;
        self.occupancy.add_location(&a.activity_id);
        self.persist_registry()?;
        self.notify(UpdateKind::ActivityCreated, &a.activity_id, None);
        Ok(a)
    }

    pub fn update_activity(&mut self, token: Option<&str>, activity_id: &str, patch: ActivityPatch) -> Result<Activity, ApiError> {
        let owner = self.business(token)?;
        let renamed = patch.name.is_some();
        let a = self.registry.update_activity(&owner, activity_id, patch)?;
        self.persist_registry()?;
        self.notify(UpdateKind::ActivityUpdated, activity_id, None);
        if renamed {
            for d in self.registry.devices_of(activity_id) {
                self.publish_location(&d);
            }
        }
        Ok(a)
    }

    pub fn issue_otp(&mut self, token: Option<&str>, activity_id: &str) -> Result<OtpGrant, ApiError> {
        let owner = self.business(token)?;
        let now = self.now_ms();
        let g = self.registry.issue_otp(&owner, activity_id, now, &mut *self.rng)?;
        self.persist_registry()?;
        Ok(g)
    }

    /// Pairs a whitelisted device with the activity an OTP belongs to. The
    /// OTP is the credential; no session token is needed.
    pub fn associate(&mut self, device_id: &str, otp: &str) -> Result<Association, ApiError> {
        let now = self.now_ms();
        let known = self.broker.whitelist().has_device(device_id);
        let a = self.registry.associate(device_id, otp, now, known)?;
        self.persist_registry()?;
        self.publish_location(device_id);
        self.notify(UpdateKind::DeviceAssociated, &a.activity_id, Some(device_id));
        Ok(Association {
            device_id: device_id.to_owned(),
            activity_id: a.activity_id,
        })
    }

    pub fn dissociate(&mut self, token: Option<&str>, device_id: &str) -> Result<Association, ApiError> {
        let owner = self.business(token)?;
        let activity_id = self.registry.dissociate(&owner, device_id)?;
        self.persist_registry()?;
        self.publish_location(device_id);
        self.notify(UpdateKind::DeviceDissociated, &activity_id, Some(device_id));
        Ok(Association {
            device_id: device_id.to_owned(),
            activity_id,
        })
    }

    /// Rotates the key of a device associated with one of the caller's activities.
    pub fn rotate_key(&mut self, token: Option<&str>, device_id: &str) -> Result<(), ApiError> {
        let owner = self.business(token)?;
        let activity = self
            .registry
            .device_location(device_id)
            .ok_or(RegistryError::NotFound)?
            .to_owned();
        self.registry.owned_activity(&owner, &activity)?;
        self.rotate_key_unchecked(device_id)?;
        Ok(())
    }

    /// Operator-level rotation with no ownership check.
    pub fn rotate_key_unchecked(&mut self, device_id: &str) -> Result<DeviceKey, ApiError> {
        let now = self.now_ms();
        let (key, actions) = self
            .broker
            .rotate_key(device_id, &mut *self.rng, now)
            .map_err(|_| RegistryError::NotFound)?;
        self.outbox.extend(actions);
        self.sync_whitelist_file();
        Ok(key)
    }

    /// Adds a device to the whitelist with a fresh key.
    pub fn enroll_device(&mut self, device_id: &str, device_type: &str) -> Result<DeviceKey, ApiError> {
        let key = DeviceKey::generate(&mut *self.rng);
        self.broker
            .add_device(device_id, device_type, key)
            .map_err(|e| RegistryError::Invalid(e.to_string()))?;
        self.publish_config(device_id);
        self.sync_whitelist_file();
        Ok(key)
    }

    pub fn revoke_key(&mut self, key: &DeviceKey) {
        let actions = self.broker.revoke(key);
        self.outbox.extend(actions);
        self.sync_whitelist_file();
    }

    pub fn occupancy_view(&self, token: Option<&str>, activity_id: &str) -> Result<OccupancyView, ApiError> {
        let viewer = self.viewer(token)?;
        let a = self.registry.viewable_activity(activity_id, viewer.as_deref())?;
        let is_owner = viewer.as_deref() == Some(a.owner_id.as_str());
        let s = self.occupancy.state_or_empty(activity_id);
        Ok(OccupancyView {
            activity_id: activity_id.to_owned(),
            occupancy: s.occupancy,
            capacity: (is_owner || a.visibility.capacity).then_some(a.capacity),
            as_of_ms: s.as_of_ms,
        })
    }

    pub fn history(&self, token: Option<&str>, activity_id: &str, from_ms: u64, to_ms: u64) -> Result<Vec<HistoryPoint>, ApiError> {
        let owner = self.business(token)?;
        self.registry.owned_activity(&owner, activity_id)?;
        if from_ms > to_ms {
            return Err(RegistryError::Invalid("from must not be after to".into()).into());
        }
        Ok(self
            .occupancy
            .history(activity_id, from_ms, to_ms)
            .unwrap_or_default())
    }

    pub fn nearby(&self, lat: f64, lon: f64, radius_m: f64) -> Result<Vec<NearbyActivity>, ApiError> {
        Ok(self
            .registry
            .nearby(lat, lon, radius_m)?
            .into_iter()
            .map(|(a, d)| NearbyActivity {
                activity: a.public_view(),
                distance_m: d,
                occupancy: self.occupancy.state(&a.activity_id).map_or(0, |s| s.occupancy),
            })
            .collect())
    }

    pub fn activity_detail(&self, token: Option<&str>, activity_id: &str) -> Result<ActivityDetail, ApiError> {
        let viewer = self.viewer(token)?;
        let a = self.registry.viewable_activity(activity_id, viewer.as_deref())?;
        let state = self.occupancy.state_or_empty(activity_id);
        let is_owner = viewer.as_deref() == Some(a.owner_id.as_str());
        let mut activity = a.public_view();
        let owner = is_owner.then(|| {
            activity.address = Some(a.address.clone());
            activity.capacity = Some(a.capacity);
            OwnerDetail {
                visibility: a.visibility,
                devices: self.registry.devices_of(activity_id),
                anomaly_underflow: state.anomaly_underflow,
            }
        });
        Ok(ActivityDetail {
            activity,
            occupancy: state.occupancy,
            owner,
        })
    }

    pub fn activity_devices(&self, token: Option<&str>, activity_id: &str) -> Result<Vec<DeviceView>, ApiError> {
        let owner = self.business(token)?;
        self.registry.owned_activity(&owner, activity_id)?;
        Ok(self
            .registry
            .devices_of(activity_id)
            .into_iter()
            .map(|d| DeviceView {
                device_type: self
                    .broker
                    .whitelist()
                    .device_type(&d)
                    .unwrap_or(crate::broker::DEFAULT_DEVICE_TYPE)
                    .to_owned(),
                online: self.broker.is_online(&d),
                device_id: d,
            })
            .collect())
    }

    /// Activities owned by the caller.
    pub fn my_activities(&self, token: Option<&str>) -> Result<Vec<Activity>, ApiError> {
        let owner = self.business(token)?;
        Ok(self
            .registry
            .activities()
            .filter(|a| a.owner_id == owner)
            .cloned()
            .collect())
    }
}

fn replay(store: &mut OccupancyStore, e: &JournalEntry) {
    store.add_location(&e.location_id);
    let _ = store.apply(&e.location_id, &e.sensor_id, e.event_seq, e.direction, e.timestamp_ms);
}

fn snapshot_matches(snap: &Snapshot, entries: &[JournalEntry]) -> bool {
    let Ok(n) = usize::try_from(snap.journal_lines) else {
        return false;
    };
    if n > entries.len() {
        return false;
    }
    let mut store = OccupancyStore::new();
    for e in &entries[..n] {
        replay(&mut store, e);
    }
    snap.locations.iter().all(|(id, occ, as_of)| match store.state(id) {
        Some(s) => s.occupancy == *occ && s.as_of_ms == *as_of,
        None => *occ == 0,
    })
}
