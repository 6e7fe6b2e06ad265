//! Line-oriented broker wire protocol.
//!
//! Every frame is one compact JSON object terminated by LF, tagged by `t`:
//!
//! ```text
//! {"t":"CONNECT","key":"<32 hex>","client_id":"door-1"}
//! {"t":"CONNACK"}
//! {"t":"REJECT","reason":"..."}
//! {"t":"SUB","filter":"devices/door-1/config/+"}
//! {"t":"SUBACK","filter":"devices/door-1/config/+"}
//! {"t":"PUB","topic":"locations/L1/delta","mid":7,"qos":1,"payload":"{...}"}
//! {"t":"PUBACK","mid":7}
//! {"t":"PING"}
//! {"t":"PONG"}
//! ```
//!
//! `payload` is itself UTF-8 JSON text carried as a string.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Direction;

pub const MAX_PAYLOAD_BYTES: usize = 64 * 1024;
/// Upper bound for one encoded frame line, escaping included.
pub const MAX_LINE_BYTES: usize = 8 * MAX_PAYLOAD_BYTES;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "UPPERCASE")]
pub enum Frame {
    Connect { key: String, client_id: String },
    Connack,
    Reject { reason: String },
    Sub { filter: String },
    Suback { filter: String },
    Pub {
        topic: String,
        mid: u32,
        qos: u8,
        payload: String,
    },
    Puback { mid: u32 },
    Ping,
    Pong,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("payload of {0} bytes exceeds limit")]
    PayloadTooLarge(usize),
    #[error("unsupported qos {0}")]
    Qos(u8),
}

impl Frame {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    pub fn decode(line: &str) -> Result<Frame, WireError> {
        if line.len() > MAX_LINE_BYTES {
            return Err(WireError::Malformed("line too long".into()));
        }
        let frame: Frame =
            serde_json::from_str(line).map_err(|e| WireError::Malformed(e.to_string()))?;
        if let Frame::Pub { qos, payload, .. } = &frame {
            if *qos > 1 {
                return Err(WireError::Qos(*qos));
            }
            if payload.len() > MAX_PAYLOAD_BYTES {
                return Err(WireError::PayloadTooLarge(payload.len()));
            }
        }
        Ok(frame)
    }

    pub fn publish(topic: impl Into<String>, mid: u32, qos: u8, payload: impl Into<String>) -> Frame {
        Frame::Pub {
            topic: topic.into(),
            mid,
            qos,
            payload: payload.into(),
        }
    }
}

/// `locations/{id}/delta`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaPayload {
    pub sensor_id: String,
    pub event_seq: u64,
    pub direction: Direction,
    pub timestamp_ms: u64,
}

/// `locations/{id}/occupancy`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyPayload {
    pub location_id: String,
    pub occupancy: u64,
    pub timestamp_ms: u64,
}

/// `devices/{id}/hello`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloPayload {
    pub device_id: String,
}

/// `devices/{id}/config/type`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeConfig {
    pub device_type: String,
}

/// `devices/{id}/config/location`. Both fields are null until the device is
/// associated with an activity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationConfig {
    pub location_id: Option<String>,
    pub activity_name: Option<String>,
}

/// `devices/{id}/config/constants`.
pub type ConstantsConfig = BTreeMap<String, f64>;

/// `devices/{id}/key`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPayload {
    pub device_id: String,
    pub key: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    ActivityCreated,
    ActivityUpdated,
    DeviceAssociated,
    DeviceDissociated,
}

/// `registry/updates`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryUpdate {
    pub kind: UpdateKind,
    pub activity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
}

pub fn to_payload<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("payload types always serialize")
}

pub fn from_payload<T: for<'de> Deserialize<'de>>(payload: &str) -> Result<T, WireError> {
    serde_json::from_str(payload).map_err(|e| WireError::Malformed(e.to_string()))
}
