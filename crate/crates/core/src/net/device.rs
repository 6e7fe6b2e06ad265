//! Coordinator runtime: the broker link (provisioning plus reliable delta
//! publication) and the ingestion context that turns thermal frames into
//! queued deltas.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::acquisition::FlowMeterUnit;
use crate::broker::DeviceKey;
use crate::clock::{Clock, SystemClock};
use crate::coordinator::{
    Backoff, ConfigMessage, DeltaQueue, DeviceConfig, DeviceFile, DeviceFileError, LedgerError,
    Provisioner, Publisher, SensorLedger, DEFAULT_RETRANSMIT_MS, DELTA_QUEUE_CAPACITY, PROVISION_TIMEOUT,
};
use crate::flow::FlowEvent;
use crate::thermal::{PipelineConfig, PipelineError, ThermalFrame};
use crate::wire::{Frame, MAX_LINE_BYTES};

const READ_POLL: Duration = Duration::from_millis(100);
const CONNACK_TIMEOUT: Duration = Duration::from_secs(10);
const HELLO_MID: u32 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("authorization failed: {0}")]
    Unauthorized(String),
    #[error("session taken over by another connection with the same client id")]
    Superseded,
    #[error("could not save rotated key: {0}")]
    SaveKey(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("frame from sensor {0:?}, which this coordinator does not serve")]
    UnknownSensor(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone)]
pub struct LinkOptions {
    pub file: DeviceFile,
    /// Where to write the device file back after a key rotation.
    pub file_path: Option<PathBuf>,
    /// Added to meter sequence numbers; see [`SensorLedger::new`].
    pub seq_base: u64,
    pub retransmit_ms: u64,
    pub provision_timeout: Duration,
    pub queue_capacity: usize,
}

impl LinkOptions {
    pub fn new(file: DeviceFile) -> Self {
        Self {
            file,
            file_path: None,
            seq_base: SystemClock.now_ms().saturating_mul(1000),
            retransmit_ms: DEFAULT_RETRANSMIT_MS,
            provision_timeout: PROVISION_TIMEOUT,
            queue_capacity: DELTA_QUEUE_CAPACITY,
        }
    }
}

/// Observable state of a link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkStatus {
    pub connected: bool,
    pub sessions: u64,
    /// Latest complete configuration.
    pub config: Option<DeviceConfig>,
    pub deltas_acked: u64,
    pub key_rotations: u64,
    /// Set when the link gave up for good.
    pub error: Option<LinkError>,
}

struct Shared {
    stop: AtomicBool,
    status: Mutex<LinkStatus>,
    changed: Condvar,
}

impl Shared {
    fn status(&self) -> MutexGuard<'_, LinkStatus> {
        self.status.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn update(&self, f: impl FnOnce(&mut LinkStatus)) {
        f(&mut self.status());
        self.changed.notify_all();
    }

    /// Sleeps up to `d`, returning early when asked to stop.
    fn sleep(&self, d: Duration) -> bool {
        let deadline = Instant::now() + d;
        while Instant::now() < deadline {
            if self.stop.load(Ordering::SeqCst) {
                return false;
            }
            thread::sleep(READ_POLL.min(deadline - Instant::now()));
        }
        !self.stop.load(Ordering::SeqCst)
    }
}

/// A running coordinator link.
pub struct DeviceHandle {
    shared: Arc<Shared>,
    ledger: Arc<Mutex<SensorLedger>>,
    queue: DeltaQueue,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for DeviceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceHandle").field("status", &self.status()).finish()
    }
}

impl DeviceHandle {
    /// Starts the link thread. Sensors are attached to the ledger from the
    /// device file.
    pub fn start(options: LinkOptions) -> Result<DeviceHandle, DeviceFileError> {
        options.file.validate()?;
        let mut ledger = SensorLedger::new(options.seq_base);
        for s in options.file.sensor_specs() {
            ledger.attach(&s.id, &s.coverage);
        }
        let ledger = Arc::new(Mutex::new(ledger));
        let queue = DeltaQueue::with_capacity(options.queue_capacity);
        let shared = Arc::new(Shared {
            stop: AtomicBool::new(false),
            status: Mutex::new(LinkStatus::default()),
            changed: Condvar::new(),
        });
        let mut link = Link {
            key: options.file.key()?,
            publisher: Publisher::with_retransmit(queue.clone(), options.retransmit_ms),
            options,
            shared: shared.clone(),
            ledger: ledger.clone(),
            epoch: Instant::now(),
        };
        let thread = thread::Builder::new()
            .name("device-link".into())
            .spawn(move || {
                if let Err(e) = link.run() {
                    tracing::error!(error = %e, "device link stopped");
                    link.shared.update(|s| {
                        s.connected = false;
                        s.error = Some(e);
                    });
                }
            })?;
        Ok(DeviceHandle {
            shared,
            ledger,
            queue,
            thread: Some(thread),
        })
    }

    pub fn status(&self) -> LinkStatus {
        self.shared.status().clone()
    }

    pub fn queue(&self) -> &DeltaQueue {
        &self.queue
    }

    pub fn ledger(&self) -> Arc<Mutex<SensorLedger>> {
        self.ledger.clone()
    }

    /// Blocks until `pred` holds or the link fails; returns the status at
    /// that moment, or `None` on timeout.
    pub fn wait_for(&self, timeout: Duration, pred: impl Fn(&LinkStatus) -> bool) -> Option<LinkStatus> {
        let deadline = Instant::now() + timeout;
        let mut s = self.shared.status();
        loop {
            if pred(&s) || s.error.is_some() {
                return Some(s.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            s = self
                .shared
                .changed
                .wait_timeout(s, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// The configuration once provisioning completed.
    pub fn wait_provisioned(&self, timeout: Duration) -> Result<Option<DeviceConfig>, LinkError> {
        match self.wait_for(timeout, |s| s.config.is_some()) {
            Some(LinkStatus { error: Some(e), .. }) => Err(e),
            Some(s) => Ok(s.config),
            None => Ok(None),
        }
    }

    /// Waits until every queued delta has been acknowledged.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.queue.is_empty() {
                return true;
            }
            if Instant::now() >= deadline || self.status().error.is_some() {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// An ingestion context feeding this link.
    pub fn ingestor(&self, config: PipelineConfig) -> Result<Ingestor, PipelineError> {
        let sensors: Vec<String> = self
            .ledger
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .sensors()
            .map(|(id, _)| id.to_owned())
            .collect();
        Ingestor::new(&sensors, config, self.ledger.clone(), self.queue.clone())
    }

    /// Stops the link and returns its terminal error, if any.
    pub fn stop(mut self) -> Option<LinkError> {
        self.halt();
        self.status().error
    }

    /// Waits for the link to end on its own (it only does on a fatal error).
    pub fn join(mut self) -> Option<LinkError> {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.status().error
    }

    fn halt(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for DeviceHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

enum SessionEnd {
    Stop,
    Retry,
    /// Reconnect at once, with the freshly rotated key.
    Rotated,
}

struct Link {
    options: LinkOptions,
    key: DeviceKey,
    publisher: Publisher,
    shared: Arc<Shared>,
    ledger: Arc<Mutex<SensorLedger>>,
    epoch: Instant,
}

impl Link {
    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn device_id(&self) -> &str {
        &self.options.file.device_id
    }

    fn run(&mut self) -> Result<(), LinkError> {
        let mut backoff = Backoff::new();
        while !self.shared.stop.load(Ordering::SeqCst) {
            let end = match self.connect() {
                Ok(stream) => {
                    let started = Instant::now();
                    let end = self.session(stream);
                    self.shared.update(|s| s.connected = false);
                    if started.elapsed() > Backoff::CAP {
                        backoff.reset();
                    }
                    end?
                }
                Err(e) => {
                    tracing::warn!(broker = %self.options.file.broker, error = %e, "broker unreachable");
                    SessionEnd::Retry
                }
            };
            match end {
                SessionEnd::Stop => break,
                SessionEnd::Rotated => backoff.reset(),
                SessionEnd::Retry => {
                    let delay = backoff.next_delay();
                    tracing::info!(delay_s = delay.as_secs(), "reconnecting after delay");
                    if !self.shared.sleep(delay) {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn connect(&self) -> io::Result<TcpStream> {
        let addr = self
            .options
            .file
            .broker
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(ErrorKind::NotFound, "broker address did not resolve"))?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(READ_POLL))?;
        Ok(stream)
    }

    fn session(&mut self, stream: TcpStream) -> Result<SessionEnd, LinkError> {
        match self.try_session(stream) {
            Ok(end) => end,
            Err(e) => {
                tracing::warn!(error = %e, "broker connection lost");
                Ok(SessionEnd::Retry)
            }
        }
    }

    fn try_session(&mut self, stream: TcpStream) -> io::Result<Result<SessionEnd, LinkError>> {
        let mut writer = stream.try_clone()?;
        let mut reader = LineReader::new(stream);
        let send = |w: &mut TcpStream, f: &Frame| -> io::Result<()> {
            let mut line = f.encode();
            line.push('\n');
            w.write_all(line.as_bytes())
        };

        send(
            &mut writer,
            &Frame::Connect {
                key: self.key.to_hex(),
                client_id: self.device_id().to_owned(),
            },
        )?;
        let deadline = Instant::now() + CONNACK_TIMEOUT;
        loop {
            match reader.next()? {
                Some(Frame::Connack) => break,
                Some(Frame::Reject { reason }) => return Ok(Err(LinkError::Unauthorized(reason))),
                Some(_) => {}
                None if self.shared.stop.load(Ordering::SeqCst) => return Ok(Ok(SessionEnd::Stop)),
                None if Instant::now() >= deadline => {
                    return Err(io::Error::new(ErrorKind::TimedOut, "no CONNACK"));
                }
                None => {}
            }
        }
        tracing::info!(device = self.device_id(), "connected to broker");
        self.shared.update(|s| {
            s.connected = true;
            s.sessions += 1;
        });

        let mut provisioner = Provisioner::new(self.device_id(), self.key);
        for f in provisioner.opening_frames(HELLO_MID) {
            send(&mut writer, &f)?;
        }
        let provision_deadline = Instant::now() + self.options.provision_timeout;
        let mut provisioned = false;
        self.publisher.on_reconnect(self.now_ms());

        loop {
            if self.shared.stop.load(Ordering::SeqCst) {
                return Ok(Ok(SessionEnd::Stop));
            }
            for f in self.publisher.poll(self.now_ms()) {
                send(&mut writer, &f)?;
            }
            let Some(frame) = reader.next()? else {
                if !provisioned && Instant::now() >= provision_deadline {
                    tracing::warn!("provisioning timed out");
                    return Ok(Ok(SessionEnd::Retry));
                }
                continue;
            };
            match frame {
                Frame::Pub { topic, mid, qos, payload } => {
                    if qos == 1 {
                        send(&mut writer, &Frame::Puback { mid })?;
                    }
                    let msg = match ConfigMessage::parse(self.device_id(), &topic, &payload) {
                        Ok(Some(m)) => m,
                        Ok(None) => continue,
                        Err(e) => {
                            tracing::warn!(error = %e, "ignoring bad configuration message");
                            continue;
                        }
                    };
                    if let ConfigMessage::Key(k) = &msg {
                        if *k != self.key {
                            return Ok(self.adopt_key(*k));
                        }
                    }
                    provisioner.accept(msg);
                    if let Some(config) = provisioner.config() {
                        if !provisioned {
                            tracing::info!(location = ?config.location_id, "provisioned");
                        }
                        provisioned = true;
                        self.ledger
                            .lock()
                            .unwrap_or_else(|p| p.into_inner())
                            .set_location(config.location_id.clone());
                        self.shared.update(|s| s.config = Some(config));
                    }
                }
                Frame::Puback { mid } if mid != HELLO_MID => {
                    if self.publisher.on_puback(mid).is_some() {
                        self.shared.update(|s| s.deltas_acked += 1);
                    }
                }
                Frame::Reject { reason } => {
                    tracing::warn!(reason, "broker closed the session");
                    return Ok(match reason.as_str() {
                        "key revoked" => Err(LinkError::Unauthorized(reason)),
                        "session taken over" => Err(LinkError::Superseded),
                        _ => Ok(SessionEnd::Retry),
                    });
                }
                _ => {}
            }
        }
    }

    fn adopt_key(&mut self, key: DeviceKey) -> Result<SessionEnd, LinkError> {
        tracing::info!(device = self.device_id(), "received a new key, reconnecting");
        self.key = key;
        self.options.file.device_key = key.to_hex();
        if let Some(path) = &self.options.file_path {
            self.options.file.save(path).map_err(|e| LinkError::SaveKey(e.to_string()))?;
        }
        self.shared.update(|s| s.key_rotations += 1);
        Ok(SessionEnd::Rotated)
    }
}

/// Line reader that tolerates read timeouts mid-line.
struct LineReader {
    inner: BufReader<TcpStream>,
    buf: Vec<u8>,
}

impl LineReader {
    fn new(stream: TcpStream) -> Self {
        Self {
            inner: BufReader::new(stream),
            buf: Vec::new(),
        }
    }

    /// Next frame, or `None` if nothing arrived within the poll interval.
    /// Undecodable lines are skipped.
    fn next(&mut self) -> io::Result<Option<Frame>> {
        match self.inner.read_until(b'\n', &mut self.buf) {
            Ok(0) => Err(io::Error::new(ErrorKind::UnexpectedEof, "broker closed the connection")),
            Ok(_) if self.buf.last() != Some(&b'\n') => Err(io::Error::new(ErrorKind::UnexpectedEof, "truncated frame")),
            Ok(_) => {
                let line = String::from_utf8_lossy(&self.buf).trim().to_owned();
                self.buf.clear();
                match Frame::decode(&line) {
                    Ok(f) => Ok(Some(f)),
                    Err(e) => {
                        tracing::warn!(error = %e, "undecodable frame from broker");
                        Ok(None)
                    }
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                if self.buf.len() > MAX_LINE_BYTES {
                    return Err(io::Error::new(ErrorKind::InvalidData, "oversized frame"));
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub frames: u64,
    pub events: u64,
    pub deltas: u64,
    /// Events that arrived before the coordinator had a location.
    pub unassociated: u64,
    pub queue_full: u64,
}

/// The ingestion context: one flow meter per attached sensor feeding the
/// shared ledger and delta queue.
pub struct Ingestor {
    units: BTreeMap<String, FlowMeterUnit>,
    ledger: Arc<Mutex<SensorLedger>>,
    queue: DeltaQueue,
    stats: IngestStats,
}

impl std::fmt::Debug for Ingestor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ingestor").field("stats", &self.stats).finish()
    }
}

impl Ingestor {
    pub fn new(
        sensors: &[String],
        config: PipelineConfig,
        ledger: Arc<Mutex<SensorLedger>>,
        queue: DeltaQueue,
    ) -> Result<Self, PipelineError> {
        let units = sensors
            .iter()
            .map(|s| Ok((s.clone(), FlowMeterUnit::new(s, config)?)))
            .collect::<Result<_, PipelineError>>()?;
        Ok(Self {
            units,
            ledger,
            queue,
            stats: IngestStats::default(),
        })
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    /// Runs one frame through its sensor's meter and queues the resulting
    /// deltas. Returns the passage events the frame produced.
    pub fn on_frame(&mut self, frame: &ThermalFrame) -> Result<Vec<FlowEvent>, IngestError> {
        let unit = self
            .units
            .get_mut(frame.sensor_id())
            .ok_or_else(|| IngestError::UnknownSensor(frame.sensor_id().to_owned()))?;
        let events = unit.on_frame(frame)?;
        unit.drain();
        self.stats.frames += 1;
        self.stats.events += events.len() as u64;
        let mut ledger = self.ledger.lock().unwrap_or_else(|p| p.into_inner());
        for e in &events {
            match ledger.ingest(e) {
                Ok(Some(update)) => match self.queue.push(update) {
                    Ok(()) => self.stats.deltas += 1,
                    Err(_) => self.stats.queue_full += 1,
                },
                Ok(None) => {}
                Err(LedgerError::Unassociated) => self.stats.unassociated += 1,
                Err(LedgerError::UnknownSensor(s)) => return Err(IngestError::UnknownSensor(s)),
            }
        }
        Ok(events)
    }
}
