//! Centroid tracking and directional passage detection.
//!
//! The upscaled grid is split along the row axis into three zones. A track
//! that goes from zone A to zone B (possibly through MID) produces an entry,
//! B to A an exit. After firing, a track must reach the opposite outer zone
//! before it can fire again, so dithering on the line never double counts.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::thermal::{Cluster, GRID_SIZE};

/// Maximum centroid displacement between consecutive frames, in grid cells.
pub const MAX_DISPLACEMENT: f64 = 6.0;
/// Consecutive misses after which a track is retired.
pub const MAX_MISSED_FRAMES: u32 = 3;
/// Outbound event queue bound.
pub const EVENT_QUEUE_CAPACITY: usize = 10_000;

/// First row of the middle zone.
pub const MID_START_ROW: usize = 9;
/// First row of zone B.
pub const B_START_ROW: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    A,
    Mid,
    B,
}

impl Zone {
    pub fn of_row(row: f64) -> Zone {
        let cell = row.floor().clamp(0.0, (GRID_SIZE - 1) as f64) as usize;
        if cell < MID_START_ROW {
            Zone::A
        } else if cell < B_START_ROW {
            Zone::Mid
        } else {
            Zone::B
        }
    }
}

/// Passage direction: entry is A→B, exit is B→A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Direction {
    Entry,
    Exit,
}

impl Direction {
    pub fn sign(self) -> i64 {
        match self {
            Direction::Entry => 1,
            Direction::Exit => -1,
        }
    }
}

impl From<Direction> for i8 {
    fn from(d: Direction) -> i8 {
        d.sign() as i8
    }
}

impl TryFrom<i8> for Direction {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, String> {
        match v {
            1 => Ok(Direction::Entry),
            -1 => Ok(Direction::Exit),
            other => Err(format!("direction must be +1 or -1, got {other}")),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Entry => "+1",
            Direction::Exit => "-1",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "+1" | "1" => Ok(Direction::Entry),
            "-1" => Ok(Direction::Exit),
            other => Err(format!("bad direction {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub timestamp_ms: u64,
    pub row: f64,
    pub col: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub positions: Vec<TrackPoint>,
    /// Zones visited, consecutive repeats collapsed.
    pub zone_history: Vec<Zone>,
    pub missed_frames: u32,
    emitted: usize,
}

impl Track {
    fn new(track_id: u64, point: TrackPoint) -> Self {
        Self {
            track_id,
            positions: vec![point],
            zone_history: vec![Zone::of_row(point.row)],
            missed_frames: 0,
            emitted: 0,
        }
    }

    pub fn last(&self) -> &TrackPoint {
        self.positions.last().expect("tracks are never empty")
    }

    fn push(&mut self, point: TrackPoint) {
        self.positions.push(point);
        let zone = Zone::of_row(point.row);
        if self.zone_history.last() != Some(&zone) {
            self.zone_history.push(zone);
        }
        self.missed_frames = 0;
    }

    fn anchor(&self) -> Option<Zone> {
        self.zone_history.iter().rev().copied().find(|z| *z != Zone::Mid)
    }

    /// Whether reaching zone B next would fire an entry.
    pub fn entry_armed(&self) -> bool {
        self.anchor() == Some(Zone::A)
    }

    /// Whether reaching zone A next would fire an exit.
    pub fn exit_armed(&self) -> bool {
        self.anchor() == Some(Zone::B)
    }
}

/// All crossings implied by a zone history, in order.
pub fn crossings(zone_history: &[Zone]) -> Vec<Direction> {
    let mut anchor = None;
    let mut out = Vec::new();
    for &zone in zone_history {
        match (anchor, zone) {
            (_, Zone::Mid) => continue,
            (Some(Zone::A), Zone::B) => out.push(Direction::Entry),
            (Some(Zone::B), Zone::A) => out.push(Direction::Exit),
            _ => {}
        }
        anchor = Some(zone);
    }
    out
}

/// Crossings of `track` not yet reported. Marks them reported.
pub fn detect_crossings(track: &mut Track) -> Vec<Direction> {
    let all = crossings(&track.zone_history);
    let fresh = all[track.emitted..].to_vec();
    track.emitted = all.len();
    fresh
}

fn distance(p: &TrackPoint, c: (f64, f64)) -> f64 {
    ((p.row - c.0).powi(2) + (p.col - c.1).powi(2)).sqrt()
}

/// Greedy nearest-neighbour association of one frame's centroids.
///
/// Pairs are taken in ascending distance; pairs farther than
/// [`MAX_DISPLACEMENT`] are never matched. Unmatched centroids start new
/// tracks (ids drawn from `next_id`), unmatched tracks accrue a miss and are
/// retired after [`MAX_MISSED_FRAMES`] consecutive misses.
pub fn associate(
    tracks: Vec<Track>,
    centroids: &[(f64, f64)],
    timestamp_ms: u64,
    next_id: &mut u64,
) -> Vec<Track> {
    let mut pairs = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (ci, &c) in centroids.iter().enumerate() {
            let d = distance(t.last(), c);
            if d <= MAX_DISPLACEMENT {
                pairs.push((d, ti, ci));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut track_match = vec![None; tracks.len()];
    let mut centroid_used = vec![false; centroids.len()];
    for (_, ti, ci) in pairs {
        if track_match[ti].is_none() && !centroid_used[ci] {
            track_match[ti] = Some(ci);
            centroid_used[ci] = true;
        }
    }

    let mut out = Vec::with_capacity(tracks.len() + centroids.len());
    for (mut track, matched) in tracks.into_iter().zip(track_match) {
        match matched {
            Some(ci) => {
                let (row, col) = centroids[ci];
                track.push(TrackPoint {
                    timestamp_ms,
                    row,
                    col,
                });
            }
            None => track.missed_frames += 1,
        }
        if track.missed_frames < MAX_MISSED_FRAMES {
            out.push(track);
        }
    }
    for (ci, &(row, col)) in centroids.iter().enumerate() {
        if !centroid_used[ci] {
            out.push(Track::new(
                *next_id,
                TrackPoint {
                    timestamp_ms,
                    row,
                    col,
                },
            ));
            *next_id += 1;
        }
    }
    out
}

/// A sequenced passage event from one sensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowEvent {
    pub sensor_id: String,
    pub event_seq: u64,
    pub direction: Direction,
    pub timestamp_ms: u64,
}

#[derive(Debug, Error, PartialEq)]
#[error("bad event line {0:?}")]
pub struct EventLineError(pub String);

impl FlowEvent {
    /// Parses an event-log line: `sensor_id event_seq direction timestamp_ms`.
    pub fn parse_line(line: &str) -> Result<Self, EventLineError> {
        let err = || EventLineError(line.to_owned());
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 4 {
            return Err(err());
        }
        Ok(FlowEvent {
            sensor_id: t[0].to_owned(),
            event_seq: t[1].parse().map_err(|_| err())?,
            direction: t[2].parse().map_err(|_| err())?,
            timestamp_ms: t[3].parse().map_err(|_| err())?,
        })
    }
}

impl fmt::Display for FlowEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.sensor_id, self.event_seq, self.direction, self.timestamp_ms
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowDiagnostics {
    pub events_emitted: u64,
    pub events_dropped: u64,
    pub tracks_started: u64,
}

/// Tracker plus sequenced outbound queue for one sensor.
#[derive(Debug, Clone)]
pub struct FlowMeter {
    sensor_id: String,
    tracks: Vec<Track>,
    next_track_id: u64,
    next_event_seq: u64,
    outbound: VecDeque<FlowEvent>,
    capacity: usize,
    diagnostics: FlowDiagnostics,
}

impl FlowMeter {
    pub fn new(sensor_id: impl Into<String>) -> Self {
        Self::with_capacity(sensor_id, EVENT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(sensor_id: impl Into<String>, capacity: usize) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            tracks: Vec::new(),
            next_track_id: 1,
            next_event_seq: 1,
            outbound: VecDeque::new(),
            capacity: capacity.max(1),
            diagnostics: FlowDiagnostics::default(),
        }
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn diagnostics(&self) -> FlowDiagnostics {
        self.diagnostics
    }

    /// Feeds one frame's clusters; returns the events fired by it.
    pub fn on_frame(&mut self, clusters: &[Cluster], timestamp_ms: u64) -> Vec<FlowEvent> {
        let centroids: Vec<(f64, f64)> = clusters.iter().map(|c| c.centroid).collect();
        self.on_centroids(&centroids, timestamp_ms)
    }

    pub fn on_centroids(&mut self, centroids: &[(f64, f64)], timestamp_ms: u64) -> Vec<FlowEvent> {
        let before = self.next_track_id;
        let tracks = std::mem::take(&mut self.tracks);
        self.tracks = associate(tracks, centroids, timestamp_ms, &mut self.next_track_id);
        self.diagnostics.tracks_started += self.next_track_id - before;

        let mut directions = Vec::new();
        for track in &mut self.tracks {
            directions.extend(detect_crossings(track));
        }
        self.emit(directions, timestamp_ms)
    }

    /// Sequences events and appends them to the outbound queue.
    pub fn emit(&mut self, directions: Vec<Direction>, timestamp_ms: u64) -> Vec<FlowEvent> {
        let mut fired = Vec::with_capacity(directions.len());
        for direction in directions {
            let event = FlowEvent {
                sensor_id: self.sensor_id.clone(),
                event_seq: self.next_event_seq,
                direction,
                timestamp_ms,
            };
            self.next_event_seq += 1;
            if self.outbound.len() == self.capacity {
                self.outbound.pop_front();
                self.diagnostics.events_dropped += 1;
            }
            self.outbound.push_back(event.clone());
            self.diagnostics.events_emitted += 1;
            fired.push(event);
        }
        fired
    }

    /// Takes everything queued so far.
    pub fn drain(&mut self) -> Vec<FlowEvent> {
        self.outbound.drain(..).collect()
    }
}
