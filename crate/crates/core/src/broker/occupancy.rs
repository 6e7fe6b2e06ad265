//! Per-location occupancy with event-id deduplication.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Direction;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown location {0:?}")]
pub struct UnknownLocation(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub timestamp_ms: u64,
    pub occupancy: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyState {
    pub location_id: String,
    pub occupancy: u64,
    pub as_of_ms: u64,
    pub anomaly_underflow: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    /// First delivery of this event; carries the new occupancy.
    Applied(u64),
    Duplicate,
}

#[derive(Debug, Clone, Default)]
struct Location {
    occupancy: u64,
    as_of_ms: u64,
    anomaly_underflow: u64,
    seen: HashSet<(String, u64)>,
    history: Vec<HistoryPoint>,
}

/// Occupancy for every known location. Single writer: callers serialize
/// access (the hub owns one instance behind its lock).
#[derive(Debug, Clone, Default)]
pub struct OccupancyStore {
    locations: BTreeMap<String, Location>,
}

impl OccupancyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_location(&mut self, location_id: &str) {
        self.locations.entry(location_id.to_owned()).or_default();
    }

    pub fn contains(&self, location_id: &str) -> bool {
        self.locations.contains_key(location_id)
    }

    pub fn has_seen(&self, location_id: &str, sensor_id: &str, event_seq: u64) -> bool {
        self.locations
            .get(location_id)
            .is_some_and(|l| l.seen.contains(&(sensor_id.to_owned(), event_seq)))
    }

    /// Applies one event unless `(sensor_id, event_seq)` was seen before.
    ///
    /// Occupancy never goes below zero: a decrement at zero is recorded as
    /// an underflow anomaly and leaves the count unchanged.
    pub fn apply(
        &mut self,
        location_id: &str,
        sensor_id: &str,
        event_seq: u64,
        direction: Direction,
        timestamp_ms: u64,
    ) -> Result<ApplyOutcome, UnknownLocation> {
        let loc = self
            .locations
            .get_mut(location_id)
            .ok_or_else(|| UnknownLocation(location_id.to_owned()))?;
        if !loc.seen.insert((sensor_id.to_owned(), event_seq)) {
            return Ok(ApplyOutcome::Duplicate);
        }
        match direction {
            Direction::Entry => loc.occupancy += 1,
            Direction::Exit if loc.occupancy == 0 => loc.anomaly_underflow += 1,
            Direction::Exit => loc.occupancy -= 1,
        }
        loc.as_of_ms = loc.as_of_ms.max(timestamp_ms);
        loc.history.push(HistoryPoint {
            timestamp_ms,
            occupancy: loc.occupancy,
        });
        Ok(ApplyOutcome::Applied(loc.occupancy))
    }

    pub fn state(&self, location_id: &str) -> Option<OccupancyState> {
        self.locations.get(location_id).map(|l| OccupancyState {
            location_id: location_id.to_owned(),
            occupancy: l.occupancy,
            as_of_ms: l.as_of_ms,
            anomaly_underflow: l.anomaly_underflow,
        })
    }

    /// Like [`state`](Self::state), with zeroes for unknown locations.
    pub fn state_or_empty(&self, location_id: &str) -> OccupancyState {
        self.state(location_id).unwrap_or(OccupancyState {
            location_id: location_id.to_owned(),
            occupancy: 0,
            as_of_ms: 0,
            anomaly_underflow: 0,
        })
    }

    pub fn states(&self) -> Vec<OccupancyState> {
        self.locations
            .keys()
            .filter_map(|id| self.state(id))
            .collect()
    }

    /// Occupancy after each applied event with `from <= t <= to`.
    pub fn history(&self, location_id: &str, from_ms: u64, to_ms: u64) -> Option<Vec<HistoryPoint>> {
        self.locations.get(location_id).map(|l| {
            l.history
                .iter()
                .filter(|p| (from_ms..=to_ms).contains(&p.timestamp_ms))
                .copied()
                .collect()
        })
    }
}
