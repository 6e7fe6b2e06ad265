//! Acceptance criteria shared by the `acceptance` runner and the
//! integration tests. Each check returns a one-line detail on success and
//! the reason on failure.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, Barrier};
use std::time::Duration;

use flowmon::broker::{Action, DeviceKey, HistoryPoint, OccupancyStore, Whitelist};
use flowmon::clock::{Clock, ManualClock};
use flowmon::coordinator::{ConfigMessage, DeltaQueue, DeviceConfig, Provisioner, Publisher, SensorLedger};
use flowmon::experiment::{self, set_up_venue, LocalStack, RunManifest, StackConfig, SIM_ADDRESS};
use flowmon::flow::{Direction, FlowEvent};
use flowmon::hub::{Hub, HubConfig};
use flowmon::net::{DeviceHandle, LinkOptions, Request};
use flowmon::registry::{NewActivity, StubGeocoder, Visibility, OTP_TTL_MS};
use flowmon::sim::{make_test_day_with, DayParams};
use flowmon::thermal::{find_clusters, upscale, Grid, Mask, PipelineConfig, SensorCells, GRID_SIZE, MIN_CLUSTER_PIXELS, SENSOR_SIZE};
use flowmon::topic::{TopicFilter, TopicName};
use flowmon::wire::Frame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub struct Criterion {
    pub name: &'static str,
    pub limit: Duration,
    pub check: fn() -> Outcome,
}

pub const ENVELOPE_SEED: u64 = 2024;

pub fn all() -> Vec<Criterion> {
    let c = |name, secs, check| Criterion {
        name,
        limit: Duration::from_secs(secs),
        check,
    };
    vec![
        c("closed-system zero test", 30, zero_test),
        c("error-rate envelope", 600, envelope),
        c("flood fill equals union-find", 5, union_find_oracle),
        c("interpolation exactness", 1, interpolation),
        c("exactly-once under loss", 60, exactly_once_under_loss),
        c("occupancy non-negativity fuzz", 30, non_negativity_fuzz),
        c("wildcard routing oracle", 5, wildcard_oracle),
        c("provisioning permutations", 5, provisioning_permutations),
        c("durability across a crash", 60, durability),
        c("one-time password contract", 5, otp_contract),
    ]
}

// ---- end-to-end days ---------------------------------------------------------

pub fn zero_test() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let manifest = RunManifest {
        seed: 7,
        days: 1,
        passes: Some(42),
        noise_sigma_c: 0.0,
        output_dir: dir.path().join("out"),
        ..RunManifest::default()
    };
    let report = experiment::run(&manifest).map_err(err)?;
    ensure!(report.summary.complete, "run incomplete: {:?}", report.summary.error);
    let d = &report.days[0];
    ensure!(d.true_entries == 21 && d.true_exits == 21, "scripted {} entries, {} exits", d.true_entries, d.true_exits);
    ensure!(d.occupancy_start == 0, "day started at {}", d.occupancy_start);
    ensure!(d.occupancy_end == 0, "end-of-day occupancy {}", d.occupancy_end);
    ensure!(d.underflow == 0, "{} underflows", d.underflow);
    Ok(format!("detected {} of 42 passes, end occupancy 0", d.detected))
}

pub fn envelope() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let manifest = RunManifest {
        seed: ENVELOPE_SEED,
        days: 15,
        mean_passes: 42.0,
        noise_sigma_c: 0.3,
        output_dir: dir.path().join("out"),
        ..RunManifest::default()
    };
    let report = experiment::run(&manifest).map_err(err)?;
    let s = &report.summary;
    ensure!(s.complete && report.days.len() == 15, "run incomplete: {:?}", s.error);
    let drifts: Vec<u64> = report.days.iter().map(|d| d.drift).collect();
    ensure!(s.max_drift <= 2, "max drift {} > 2 (per day {drifts:?})", s.max_drift);
    ensure!(s.median_drift <= 1.0, "median drift {} > 1 (per day {drifts:?})", s.median_drift);
    // The registry floors at zero, so drift alone can hide a missed entry
    // followed by its exit. The detector's own balance must hold as well.
    let imbalance: Vec<u64> = report
        .days
        .iter()
        .map(|d| (d.detected_entries as u64).abs_diff(d.detected_exits as u64))
        .collect();
    ensure!(imbalance.iter().all(|&i| i <= 2), "detected entry/exit imbalance {imbalance:?}");
    ensure!(report.days.iter().all(|d| d.accounts()), "a day's counts do not add up");
    Ok(format!(
        "drift per day {drifts:?}, median {}, {} of {} passes detected",
        s.median_drift, s.total_detected, s.total_true_passes
    ))
}

// ---- pipeline oracles --------------------------------------------------------

fn neighbours(r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i32..=1)
        .flat_map(move |dr| (-1i32..=1).map(move |dc| (dr, dc)))
        .filter(|&d| d != (0, 0))
        .map(move |(dr, dc)| (r as i32 + dr, c as i32 + dc))
        .filter(|&(nr, nc)| (0..GRID_SIZE as i32).contains(&nr) && (0..GRID_SIZE as i32).contains(&nc))
        .map(|(nr, nc)| (nr as usize, nc as usize))
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut x = x;
        while self.0[x] != root {
            let next = self.0[x];
            self.0[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Components of at least `MIN_CLUSTER_PIXELS` cells, each as a sorted
/// pixel set.
pub fn components_by_union_find(mask: &Mask) -> BTreeSet<Vec<(usize, usize)>> {
    let idx = |r: usize, c: usize| r * GRID_SIZE + c;
    let mut uf = UnionFind((0..GRID_SIZE * GRID_SIZE).collect());
    for r in 0..GRID_SIZE {
        for c in 0..GRID_SIZE {
            if mask[r][c] {
                for (nr, nc) in neighbours(r, c) {
                    if mask[nr][nc] {
                        uf.union(idx(r, c), idx(nr, nc));
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for r in 0..GRID_SIZE {
        for c in 0..GRID_SIZE {
            if mask[r][c] {
                groups.entry(uf.find(idx(r, c))).or_default().push((r, c));
            }
        }
    }
    groups
        .into_values()
        .filter(|g| g.len() >= MIN_CLUSTER_PIXELS)
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

pub fn random_mask(rng: &mut impl Rng) -> (Mask, Grid) {
    let density = rng.random_range(0.05..0.65);
    let mut mask = [[false; GRID_SIZE]; GRID_SIZE];
    let mut excess = [[0.0; GRID_SIZE]; GRID_SIZE];
    for r in 0..GRID_SIZE {
        for c in 0..GRID_SIZE {
            if rng.random_bool(density) {
                mask[r][c] = true;
                excess[r][c] = rng.random_range(0.5..5.0);
            }
        }
    }
    (mask, excess)
}

pub fn union_find_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut total = 0;
    for i in 0..200 {
        let (mask, excess) = random_mask(&mut rng);
        let expected = components_by_union_find(&mask);
        let clusters = find_clusters(&mask, &excess).map_err(err)?;
        let got: BTreeSet<Vec<(usize, usize)>> = clusters.iter().map(|c| c.pixels.clone()).collect();
        ensure!(clusters.len() == expected.len(), "mask {i}: {} clusters, oracle {}", clusters.len(), expected.len());
        ensure!(got == expected, "mask {i}: memberships differ");
        total += expected.len();
    }
    Ok(format!("200 masks, {total} components matched"))
}

/// Keys cubic convolution kernel with a = -1/2.
fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x.powi(3) - 2.5 * x.powi(2) + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x.powi(2) - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Source value at any integer index, continuing each axis linearly past
/// the edge.
fn extended(src: &SensorCells, i: i32, j: i32) -> f64 {
    let n = SENSOR_SIZE as i32;
    let along = |k: i32, at: &dyn Fn(i32) -> f64| -> f64 {
        if k < 0 {
            at(0) + k as f64 * (at(1) - at(0))
        } else if k >= n {
            at(n - 1) + (k - n + 1) as f64 * (at(n - 1) - at(n - 2))
        } else {
            at(k)
        }
    };
    along(i, &|r| along(j, &|c| src[r as usize][c as usize]))
}

/// Straight double sum of the 2-D bicubic reconstruction.
pub fn bicubic_oracle(src: &SensorCells) -> Grid {
    let mut out = [[0.0; GRID_SIZE]; GRID_SIZE];
    let pos = |o: usize| (2 * o as i32 + 1) as f64 / 6.0 - 0.5;
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (y, x) = (pos(r), pos(c));
            let mut sum = 0.0;
            for i in -3..SENSOR_SIZE as i32 + 3 {
                for j in -3..SENSOR_SIZE as i32 + 3 {
                    let w = keys(y - i as f64) * keys(x - j as f64);
                    if w != 0.0 {
                        sum += w * extended(src, i, j);
                    }
                }
            }
            *v = sum;
        }
    }
    out
}

fn max_error(a: &Grid, b: &Grid) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn interpolation() -> Outcome {
    const TOL: f64 = 1e-9;
    let pos = |o: usize| (o as f64 + 0.5) / 3.0 - 0.5;
    let constant = [[23.75; SENSOR_SIZE]; SENSOR_SIZE];
    let up = upscale(&constant);
    let e = up.iter().flatten().map(|v| (v - 23.75).abs()).fold(0.0, f64::max);
    ensure!(e <= TOL, "constant field off by {e:e}");

    let (a, b, c) = (20.0, 0.75, -0.4);
    let linear: SensorCells = std::array::from_fn(|r| std::array::from_fn(|k| a + b * r as f64 + c * k as f64));
    let up = upscale(&linear);
    let mut e_lin: f64 = 0.0;
    for (r, row) in up.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            e_lin = e_lin.max((v - (a + b * pos(r) + c * pos(k))).abs());
        }
    }
    ensure!(e_lin <= TOL, "linear field off by {e_lin:e}");

    let mut e_hot: f64 = 0.0;
    for hr in 0..SENSOR_SIZE {
        for hc in 0..SENSOR_SIZE {
            let mut hot = [[22.0; SENSOR_SIZE]; SENSOR_SIZE];
            hot[hr][hc] = 36.5;
            e_hot = e_hot.max(max_error(&upscale(&hot), &bicubic_oracle(&hot)));
        }
    }
    ensure!(e_hot <= TOL, "single hot cell off by {e_hot:e}");
    Ok(format!("max error constant {e:.1e}, linear {e_lin:.1e}, hot cell {e_hot:.1e} over 64 positions"))
}

// ---- routing -----------------------------------------------------------------

/// Reference matcher written directly from the wildcard rules.
pub fn oracle_matches(filter: &[&str], topic: &[&str]) -> bool {
    match (filter, topic) {
        ([], []) => true,
        (["#"], _) => true,
        ([], _) | (_, []) => false,
        (["+", f @ ..], [_, t @ ..]) => oracle_matches(f, t),
        ([x, f @ ..], [y, t @ ..]) => x == y && oracle_matches(f, t),
    }
}

pub fn random_pair(rng: &mut impl Rng) -> (String, String) {
    const WORDS: [&str; 4] = ["a", "b", "devices", "x-1"];
    let len = rng.random_range(1..=5);
    let topic: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    // Half the filters are derived from the topic so matches are common.
    let mut filter: Vec<&str> = if rng.random_bool(0.5) {
        topic.clone()
    } else {
        let len = rng.random_range(1..=5);
        (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect()
    };
    for level in filter.iter_mut() {
        if rng.random_bool(0.25) {
            *level = "+";
        }
    }
    match rng.random_range(0..4) {
        0 => {
            let keep = rng.random_range(0..=filter.len());
            filter.truncate(keep);
            filter.push("#");
        }
        1 if filter.len() > 1 => {
            filter.pop();
        }
        2 => filter.push(WORDS[rng.random_range(0..WORDS.len())]),
        _ => {}
    }
    (topic.join("/"), filter.join("/"))
}

pub fn wildcard_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut positives = 0;
    for i in 0..1000 {
        let (t, f) = random_pair(&mut rng);
        let topic = TopicName::parse(&t).map_err(err)?;
        let filter = TopicFilter::parse(&f).map_err(err)?;
        let want = oracle_matches(&f.split('/').collect::<Vec<_>>(), &t.split('/').collect::<Vec<_>>());
        ensure!(filter.matches(&topic) == want, "pair {i}: filter {f:?} topic {t:?}, oracle says {want}");
        positives += want as u32;
    }
    ensure!((100..=900).contains(&positives), "degenerate sample: {positives} matches");
    Ok(format!("1000 pairs agree ({positives} matches)"))
}

// ---- sans-IO hub fixtures ----------------------------------------------------

pub const DEVICE: &str = "door-1";
pub const DEVICE_KEY: [u8; 16] = [0x5a; 16];

pub struct Fixture {
    pub hub: Hub,
    pub clock: ManualClock,
    pub activity_id: String,
    pub token: String,
}

/// In-memory hub with one business user, one activity and `door-1`
/// associated with it.
pub fn fixture() -> Result<Fixture, String> {
    let clock = ManualClock::new(1_000_000);
    let mut wl = Whitelist::new();
    wl.add_device(DEVICE, "coordinator", DeviceKey::from_bytes(DEVICE_KEY)).map_err(err)?;
    let config = HubConfig {
        whitelist: wl,
        business_emails: vec!["owner@example.com".into()],
        password_iterations: 1_000,
        ..HubConfig::default()
    };
    let clock_dyn: Arc<dyn Clock> = Arc::new(clock.clone());
    let (mut hub, _) = Hub::open(
        config,
        Box::new(StubGeocoder::builtin()),
        clock_dyn,
        Box::new(ChaCha8Rng::seed_from_u64(3)),
    )
    .map_err(err)?;
    let user = hub.add_user("owner@example.com", "unused".into()).map_err(err)?;
    let token = hub.issue_token(&user.user_id).map_err(err)?.token;
    let activity = hub
        .create_activity(
            Some(&token),
            NewActivity {
                name: "Gallery".into(),
                address: SIM_ADDRESS.into(),
                capacity: 80,
                visibility: Visibility::default(),
            },
        )
        .map_err(err)?;
    let otp = hub.issue_otp(Some(&token), &activity.activity_id).map_err(err)?.otp;
    hub.associate(DEVICE, &otp).map_err(err)?;
    hub.take_actions();
    Ok(Fixture {
        hub,
        clock,
        activity_id: activity.activity_id,
        token,
    })
}

/// Opens `conn` and sends CONNECT with `key`; true on CONNACK.
pub fn connect_with(hub: &mut Hub, conn: u64, key: DeviceKey) -> bool {
    hub.open_conn(conn);
    hub.on_frame(
        conn,
        Frame::Connect {
            key: key.to_hex(),
            client_id: format!("c{conn}"),
        },
    );
    hub.take_actions()
        .iter()
        .any(|a| matches!(a, Action::Send(c, Frame::Connack) if *c == conn))
}

pub fn connect(hub: &mut Hub, conn: u64) -> Result<(), String> {
    ensure!(connect_with(hub, conn, DeviceKey::from_bytes(DEVICE_KEY)), "no CONNACK on connection {conn}");
    Ok(())
}

// ---- delivery ----------------------------------------------------------------

pub fn exactly_once_under_loss() -> Outcome {
    const EVENTS: usize = 1000;
    const DROP: f64 = 0.2;
    let mut f = fixture()?;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    // One door sensor: deltas of a single sensor stay in order, so the
    // floor at zero is never hit by reordering.
    let sensor = "door-1-main";
    let mut ledger = SensorLedger::new(0);
    ledger.attach(sensor, "main door");
    ledger.set_location(Some(f.activity_id.clone()));
    let queue = DeltaQueue::default();
    let mut inside: i64 = 0;
    let mut expected: i64 = 0;
    for n in 0..EVENTS {
        let direction = if inside > 0 && rng.random_bool(0.5) { Direction::Exit } else { Direction::Entry };
        inside += direction.sign();
        let event = FlowEvent {
            sensor_id: sensor.into(),
            event_seq: n as u64 + 1,
            direction,
            timestamp_ms: 1_000_000 + n as u64,
        };
        if let Some(update) = ledger.ingest(&event).map_err(err)? {
            expected += update.direction.sign();
            queue.push(update).map_err(err)?;
        }
    }

    let mut publisher = Publisher::with_retransmit(queue.clone(), 100);
    let mut conn = 1;
    connect(&mut f.hub, conn)?;
    let mut dropped = 0u64;
    let mut steps = 0u64;
    while !publisher.is_idle() {
        steps += 1;
        ensure!(steps < 1_000_000, "no progress: {} deltas still queued", queue.len());
        let now = f.clock.advance(10);
        if steps % 500 == 0 {
            // Drop the link now and then; unacknowledged deltas go out again.
            f.hub.close_conn(conn);
            f.hub.take_actions();
            conn += 1;
            connect(&mut f.hub, conn)?;
            publisher.on_reconnect(now);
        }
        for frame in publisher.poll(now) {
            if rng.random_bool(DROP) {
                dropped += 1;
            } else {
                f.hub.on_frame(conn, frame);
            }
        }
        if steps % 10 == 0 {
            f.hub.tick();
        }
        for action in f.hub.take_actions() {
            match action {
                Action::Send(c, Frame::Puback { mid }) if c == conn => {
                    if rng.random_bool(DROP) {
                        dropped += 1;
                    } else {
                        publisher.on_puback(mid);
                    }
                }
                Action::Send(c, Frame::Pub { mid, qos: 1, .. }) if c == conn => {
                    f.hub.on_frame(conn, Frame::Puback { mid });
                }
                _ => {}
            }
        }
    }
    let state = f.hub.occupancy().state(&f.activity_id).ok_or("activity has no occupancy")?;
    let stats = f.hub.stats();
    let p = publisher.stats();
    ensure!(state.anomaly_underflow == 0, "{} underflows", state.anomaly_underflow);
    ensure!(state.occupancy as i64 == expected, "occupancy {} != expected {expected}", state.occupancy);
    ensure!(stats.deltas_applied == EVENTS as u64, "{} deltas applied", stats.deltas_applied);
    ensure!(p.retransmitted > 0 && stats.deltas_duplicate > 0, "loss never forced a retransmission");
    Ok(format!(
        "occupancy {expected}, {dropped} frames dropped, {} retransmissions, {} duplicates absorbed",
        p.retransmitted, stats.deltas_duplicate
    ))
}

/// Accounting identity for a floored counter fed the distinct events of a
/// stream: entries - exits = final - initial + underflows, with history
/// never below zero.
pub fn check_stream(events: &[(u64, Direction)]) -> Result<(u64, u64), String> {
    let mut store = OccupancyStore::new();
    store.add_location("L");
    let mut distinct = BTreeMap::new();
    for (i, &(seq, d)) in events.iter().enumerate() {
        store.apply("L", "s", seq, d, i as u64).map_err(err)?;
        distinct.entry(seq).or_insert(d);
    }
    let s = store.state("L").ok_or("location vanished")?;
    let net: i64 = distinct.values().map(|d| d.sign()).sum();
    ensure!(
        net == s.occupancy as i64 - s.anomaly_underflow as i64,
        "net {net} but occupancy {} with {} underflows",
        s.occupancy,
        s.anomaly_underflow
    );
    let history: Vec<HistoryPoint> = store.history("L", 0, u64::MAX).ok_or("no history")?;
    ensure!(history.len() == distinct.len(), "{} history points for {} events", history.len(), distinct.len());
    // Prefix minimum of the running sum counts the exits refused at zero.
    let (mut run, mut lowest) = (0i64, 0i64);
    let mut order: Vec<u64> = Vec::new();
    for &(seq, _) in events {
        if !order.contains(&seq) {
            order.push(seq);
        }
    }
    for seq in order {
        run += distinct[&seq].sign();
        lowest = lowest.min(run);
    }
    ensure!(s.anomaly_underflow as i64 == -lowest, "{} underflows, expected {}", s.anomaly_underflow, -lowest);
    Ok((s.occupancy, s.anomaly_underflow))
}

pub fn random_stream(rng: &mut impl Rng) -> Vec<(u64, Direction)> {
    let len = rng.random_range(0..60);
    let exit_bias = rng.random_range(0.2..0.8);
    let mut events: Vec<(u64, Direction)> = Vec::with_capacity(len);
    let mut next = 1;
    for _ in 0..len {
        if !events.is_empty() && rng.random_bool(0.15) {
            // Redelivery of an earlier event.
            let e = events[rng.random_range(0..events.len())];
            events.push(e);
        } else {
            let d = if rng.random_bool(exit_bias) { Direction::Exit } else { Direction::Entry };
            events.push((next, d));
            next += 1;
        }
    }
    events
}

pub fn non_negativity_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut underflows = 0;
    for i in 0..10_000 {
        let stream = random_stream(&mut rng);
        let (_, u) = check_stream(&stream).map_err(|e| format!("stream {i}: {e}"))?;
        underflows += u;
    }
    ensure!(underflows > 0, "no stream attempted an underflow");
    Ok(format!("10000 streams, {underflows} underflow attempts counted"))
}

// ---- provisioning ------------------------------------------------------------

/// The three configuration messages the hub sends `door-1` after hello.
pub fn config_messages(f: &mut Fixture) -> Result<Vec<ConfigMessage>, String> {
    connect(&mut f.hub, 1)?;
    let provisioner = Provisioner::new(DEVICE, DeviceKey::from_bytes(DEVICE_KEY));
    let mut frames = provisioner.opening_frames(0);
    let hello = frames.pop().ok_or("no hello")?;
    for frame in frames {
        f.hub.on_frame(1, frame);
    }
    // Retained copies arrive on subscription; only the hello reply counts.
    f.hub.take_actions();
    f.hub.on_frame(1, hello);
    let mut out = Vec::new();
    for a in f.hub.take_actions() {
        if let Action::Send(1, Frame::Pub { topic, payload, .. }) = a {
            if let Some(m) = ConfigMessage::parse(DEVICE, &topic, &payload).map_err(err)? {
                out.push(m);
            }
        }
    }
    Ok(out)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn provisioning_permutations() -> Outcome {
    let mut f = fixture()?;
    let messages = config_messages(&mut f)?;
    ensure!(messages.len() == 3, "hub sent {} config messages", messages.len());
    let orders = permutations(3);
    let mut configs: Vec<DeviceConfig> = Vec::new();
    for order in &orders {
        let mut p = Provisioner::new(DEVICE, DeviceKey::from_bytes(DEVICE_KEY));
        for (n, &i) in order.iter().enumerate() {
            ensure!(p.config().is_none() == (n < 3), "order {order:?}: config ready after {n} parts");
            p.accept(messages[i].clone());
        }
        configs.push(p.config().ok_or(format!("order {order:?}: incomplete"))?);
    }
    ensure!(orders.len() == 6, "{} orderings", orders.len());
    ensure!(configs.windows(2).all(|w| w[0] == w[1]), "configurations differ between orderings");
    let c = &configs[0];
    ensure!(c.location_id.as_deref() == Some(f.activity_id.as_str()), "location {:?}", c.location_id);
    ensure!(c.activity_name.as_deref() == Some("Gallery"), "activity name {:?}", c.activity_name);
    ensure!(c.device_type == "coordinator", "device type {:?}", c.device_type);
    Ok(format!("6 orderings give {} at {}", c.device_type, f.activity_id))
}

// ---- durability --------------------------------------------------------------

pub fn durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = StackConfig {
        snapshot_interval_ms: 200,
        ..StackConfig::local(dir.path())
    };
    let (stack, _) = LocalStack::start(&cfg).map_err(err)?;
    let sensor = "door-1-main".to_owned();
    let venue = set_up_venue(&stack, "door-1", std::slice::from_ref(&sensor)).map_err(err)?;
    let device = DeviceHandle::start(LinkOptions::new(venue.device.clone())).map_err(err)?;
    let status = device
        .wait_for(Duration::from_secs(10), |s| s.config.as_ref().is_some_and(|c| c.location_id.is_some()))
        .ok_or("coordinator did not provision")?;
    let config = status.config.ok_or("no config")?;
    let mut ingestor = device
        .ingestor(PipelineConfig {
            delta_threshold: config.delta_threshold(),
        })
        .map_err(err)?;
    let params = DayParams {
        start_ms: experiment::SIM_EPOCH_MS,
        ..DayParams::default()
    };
    // Crash at midday, with people still inside.
    let day = make_test_day_with(42, 11, &params);
    let half = day.frame_count() / 2;
    let mut detected = 0;
    for (frame, _) in day.render(&sensor).map_err(err)?.take(half as usize) {
        detected += ingestor.on_frame(&frame).map_err(err)?.len();
    }
    ensure!(device.wait_idle(Duration::from_secs(30)), "deltas not acknowledged");
    // Let at least one periodic snapshot land so recovery has to check it.
    std::thread::sleep(Duration::from_millis(400));
    let before = stack.durable_state();
    stack.kill();
    device.stop();

    let (restarted, report) = LocalStack::start(&cfg).map_err(err)?;
    let after = restarted.durable_state();
    restarted.stop().map_err(err)?;
    ensure!(before == after, "state changed across the crash:\n{before}\nvs\n{after}");
    ensure!(report.journal_entries == detected, "{} journal entries for {detected} events", report.journal_entries);
    ensure!(report.snapshot_consistent == Some(true), "snapshot check {:?}", report.snapshot_consistent);
    ensure!(after.contains(&format!("door-1 {}", venue.activity_id)), "association lost");
    let occupancy = before
        .lines()
        .find(|l| l.starts_with(&venue.activity_id))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap_or("0")
        .to_owned();
    ensure!(occupancy != "0", "nobody inside at the crash; the check proves little");
    Ok(format!("{detected} events replayed, occupancy {occupancy} and association identical after restart"))
}

// ---- one-time passwords ------------------------------------------------------

/// Minimal blocking HTTP/1.1 POST; returns the status code.
pub fn post_status(addr: SocketAddr, path: &str, body: &str) -> Result<u16, String> {
    let mut s = TcpStream::connect(addr).map_err(err)?;
    s.set_read_timeout(Some(Duration::from_secs(5))).map_err(err)?;
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .map_err(err)?;
    let mut response = String::new();
    s.read_to_string(&mut response).map_err(err)?;
    response
        .split_whitespace()
        .nth(1)
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| format!("bad response {response:?}"))
}

fn otp_for(stack: &LocalStack, token: &str, activity: &str) -> Result<String, String> {
    let g = stack
        .call(Request::new("POST", &format!("/activities/{activity}/otp")).bearer(token))
        .map_err(err)?;
    g["otp"].as_str().map(str::to_owned).ok_or("no otp field".into())
}

fn associate_status(stack: &LocalStack, device: &str, otp: &str) -> u16 {
    let body = serde_json::json!({ "device_id": device, "otp": otp });
    stack.api.handle(&Request::new("POST", "/devices/associate").json(&body)).status
}

fn enroll(stack: &LocalStack, device: &str) -> Result<(), String> {
    stack
        .node()
        .with_hub(|h| h.enroll_device(device, "coordinator"))
        .map(|_| ())
        .map_err(err)
}

pub fn otp_race(stack: &LocalStack, token: &str, activity: &str, round: usize) -> Result<(), String> {
    let devices = [format!("race-{round}-a"), format!("race-{round}-b")];
    for d in &devices {
        enroll(stack, d)?;
    }
    let otp = otp_for(stack, token, activity)?;
    let addr = stack.http.local_addr();
    let barrier = Arc::new(Barrier::new(2));
    let handles: Vec<_> = devices
        .iter()
        .map(|d| {
            let body = serde_json::json!({ "device_id": d, "otp": otp }).to_string();
            let barrier = barrier.clone();
            std::thread::spawn(move || {
                barrier.wait();
                post_status(addr, "/devices/associate", &body)
            })
        })
        .collect();
    let mut codes = Vec::new();
    for h in handles {
        codes.push(h.join().map_err(|_| "request thread panicked")??);
    }
    codes.sort_unstable();
    ensure!(codes == [200, 401], "round {round}: statuses {codes:?}");
    Ok(())
}

pub fn otp_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let clock = ManualClock::new(experiment::SIM_EPOCH_MS);
    let cfg = StackConfig {
        clock: Arc::new(clock.clone()),
        ..StackConfig::local(dir.path())
    };
    let (stack, _) = LocalStack::start(&cfg).map_err(err)?;
    let venue = set_up_venue(&stack, "door-1", &[]).map_err(err)?;
    let (token, activity) = (venue.token.as_str(), venue.activity_id.as_str());
    let result = (|| -> Outcome {
        const ROUNDS: usize = 10;
        for round in 0..ROUNDS {
            otp_race(&stack, token, activity, round)?;
        }

        for d in ["late-a", "late-b", "late-c"] {
            enroll(&stack, d)?;
        }
        let otp = otp_for(&stack, token, activity)?;
        clock.advance(OTP_TTL_MS - 1);
        ensure!(associate_status(&stack, "late-a", &otp) == 200, "OTP refused 1 ms before expiry");
        let otp = otp_for(&stack, token, activity)?;
        clock.advance(OTP_TTL_MS);
        let at_boundary = associate_status(&stack, "late-b", &otp);
        ensure!(at_boundary == 401, "OTP at exactly 300 s answered {at_boundary}");
        let otp = otp_for(&stack, token, activity)?;
        ensure!(associate_status(&stack, "late-c", &otp) == 200, "fresh OTP refused");
        ensure!(associate_status(&stack, "late-b", &otp) == 401, "used OTP accepted again");
        Ok(format!("{ROUNDS} concurrent races with one winner each; valid at 299.999 s, expired at 300 s"))
    })();
    stack.stop().map_err(err)?;
    result
}
