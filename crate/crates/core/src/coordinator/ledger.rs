//! Per-sensor difference values.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::flow::{Direction, FlowEvent};
use crate::wire::DeltaPayload;

/// One accepted passage, addressed to the location it happened at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaUpdate {
    pub location_id: String,
    pub sensor_id: String,
    /// Globally unique per sensor: the meter's sequence number offset by
    /// the coordinator's sequence base.
    pub event_seq: u64,
    pub direction: Direction,
    pub timestamp_ms: u64,
}

impl DeltaUpdate {
    pub fn topic(&self) -> String {
        format!("locations/{}/delta", self.location_id)
    }

    pub fn payload(&self) -> DeltaPayload {
        DeltaPayload {
            sensor_id: self.sensor_id.clone(),
            event_seq: self.event_seq,
            direction: self.direction,
            timestamp_ms: self.timestamp_ms,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("sensor {0:?} is not attached to this coordinator")]
    UnknownSensor(String),
    #[error("coordinator has no location yet")]
    Unassociated,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SensorEntry {
    pub last_event_seq: u64,
    pub difference: i64,
    pub coverage: String,
}

#[derive(Debug, Clone, Default)]
pub struct SensorLedger {
    sensors: BTreeMap<String, SensorEntry>,
    location_id: Option<String>,
    seq_base: u64,
    ignored: u64,
}

impl SensorLedger {
    /// `seq_base` is added to every meter sequence number on the way out so
    /// a restarted coordinator never reuses event ids.
    pub fn new(seq_base: u64) -> Self {
        Self {
            seq_base,
            ..Self::default()
        }
    }

    pub fn attach(&mut self, sensor_id: &str, coverage: &str) {
        self.sensors
            .entry(sensor_id.to_owned())
            .or_default()
            .coverage = coverage.to_owned();
    }

    pub fn set_location(&mut self, location_id: Option<String>) {
        self.location_id = location_id;
    }

    pub fn location(&self) -> Option<&str> {
        self.location_id.as_deref()
    }

    pub fn sensor(&self, sensor_id: &str) -> Option<&SensorEntry> {
        self.sensors.get(sensor_id)
    }

    pub fn sensors(&self) -> impl Iterator<Item = (&str, &SensorEntry)> {
        self.sensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Redelivered or stale events seen so far.
    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    /// Accepts an event with a sequence number above everything seen from
    /// its sensor; anything else is a harmless redelivery and yields `None`.
    pub fn ingest(&mut self, event: &FlowEvent) -> Result<Option<DeltaUpdate>, LedgerError> {
        let entry = self
            .sensors
            .get_mut(&event.sensor_id)
            .ok_or_else(|| LedgerError::UnknownSensor(event.sensor_id.clone()))?;
        let location_id = self.location_id.clone().ok_or(LedgerError::Unassociated)?;
        if event.event_seq <= entry.last_event_seq {
            self.ignored += 1;
            return Ok(None);
        }
        entry.last_event_seq = event.event_seq;
        entry.difference += event.direction.sign();
        Ok(Some(DeltaUpdate {
            location_id,
            sensor_id: event.sensor_id.clone(),
            event_seq: self.seq_base + event.event_seq,
            direction: event.direction,
            timestamp_ms: event.timestamp_ms,
        }))
    }
}
