//! Startup handshake: hello, then three configuration callbacks.

use std::time::Duration;

use thiserror::Error;

use crate::broker::DeviceKey;
use crate::thermal::DEFAULT_DELTA_THRESHOLD_C;
use crate::wire::{from_payload, to_payload, ConstantsConfig, Frame, HelloPayload, KeyPayload, LocationConfig, TypeConfig, WireError};

pub const PROVISION_TIMEOUT: Duration = Duration::from_secs(10);
pub const DELTA_THRESHOLD_KEY: &str = "delta_threshold";

/// Everything a coordinator learns from the server at startup.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub device_id: String,
    pub device_key: DeviceKey,
    pub device_type: String,
    pub location_id: Option<String>,
    pub activity_name: Option<String>,
    pub constants: ConstantsConfig,
}

impl DeviceConfig {
    pub fn delta_threshold(&self) -> f64 {
        self.constants
            .get(DELTA_THRESHOLD_KEY)
            .copied()
            .unwrap_or(DEFAULT_DELTA_THRESHOLD_C)
    }
}

pub fn hello_topic(device_id: &str) -> String {
    format!("devices/{device_id}/hello")
}

pub fn config_topic(device_id: &str, part: &str) -> String {
    format!("devices/{device_id}/config/{part}")
}

pub fn key_topic(device_id: &str) -> String {
    format!("devices/{device_id}/key")
}

/// A message on one of the device's own topics.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigMessage {
    Type(TypeConfig),
    Location(LocationConfig),
    Constants(ConstantsConfig),
    Key(DeviceKey),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProvisionError {
    #[error("bad payload on {topic}: {source}")]
    Payload {
        topic: String,
        #[source]
        source: WireError,
    },
    #[error("key message for another device or with a malformed key")]
    BadKey,
}

impl ConfigMessage {
    /// Interprets a publication; `Ok(None)` for topics that are not
    /// provisioning traffic for `device_id`.
    pub fn parse(device_id: &str, topic: &str, payload: &str) -> Result<Option<Self>, ProvisionError> {
        let err = |source| ProvisionError::Payload {
            topic: topic.to_owned(),
            source,
        };
        let msg = if topic == config_topic(device_id, "type") {
            ConfigMessage::Type(from_payload(payload).map_err(err)?)
        } else if topic == config_topic(device_id, "location") {
            ConfigMessage::Location(from_payload(payload).map_err(err)?)
        } else if topic == config_topic(device_id, "constants") {
            ConfigMessage::Constants(from_payload(payload).map_err(err)?)
        } else if topic == key_topic(device_id) {
            let k: KeyPayload = from_payload(payload).map_err(err)?;
            if k.device_id != device_id {
                return Err(ProvisionError::BadKey);
            }
            ConfigMessage::Key(k.key.parse().map_err(|_| ProvisionError::BadKey)?)
        } else {
            return Ok(None);
        };
        Ok(Some(msg))
    }
}

/// Collects the three configuration callbacks in any order.
#[derive(Debug, Clone)]
pub struct Provisioner {
    device_id: String,
    device_key: DeviceKey,
    device_type: Option<TypeConfig>,
    location: Option<LocationConfig>,
    constants: Option<ConstantsConfig>,
}

impl Provisioner {
    pub fn new(device_id: &str, device_key: DeviceKey) -> Self {
        Self {
            device_id: device_id.to_owned(),
            device_key,
            device_type: None,
            location: None,
            constants: None,
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn device_key(&self) -> DeviceKey {
        self.device_key
    }

    /// Subscriptions for the three config topics and the key topic, then
    /// the hello publication (QoS 1 with `hello_mid`).
    pub fn opening_frames(&self, hello_mid: u32) -> Vec<Frame> {
        let mut out: Vec<Frame> = ["type", "location", "constants"]
            .iter()
            .map(|p| Frame::Sub {
                filter: config_topic(&self.device_id, p),
            })
            .collect();
        out.push(Frame::Sub {
            filter: key_topic(&self.device_id),
        });
        out.push(Frame::publish(
            hello_topic(&self.device_id),
            hello_mid,
            1,
            to_payload(&HelloPayload {
                device_id: self.device_id.clone(),
            }),
        ));
        out
    }

    /// Records one message. Later copies of a part replace earlier ones.
    pub fn accept(&mut self, msg: ConfigMessage) {
        match msg {
            ConfigMessage::Type(t) => self.device_type = Some(t),
            ConfigMessage::Location(l) => self.location = Some(l),
            ConfigMessage::Constants(c) => self.constants = Some(c),
            ConfigMessage::Key(k) => self.device_key = k,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.device_type.is_some() && self.location.is_some() && self.constants.is_some()
    }

    /// The configuration, once all three parts have arrived.
    pub fn config(&self) -> Option<DeviceConfig> {
        let (t, l, c) = (self.device_type.as_ref()?, self.location.as_ref()?, self.constants.as_ref()?);
        Some(DeviceConfig {
            device_id: self.device_id.clone(),
            device_key: self.device_key,
            device_type: t.device_type.clone(),
            location_id: l.location_id.clone(),
            activity_name: l.activity_name.clone(),
            constants: c.clone(),
        })
    }
}

/// Retry delays 1, 2, 4, ... seconds, capped at 30.
#[derive(Debug, Clone)]
pub struct Backoff {
    next: Duration,
}

impl Backoff {
    pub const INITIAL: Duration = Duration::from_secs(1);
    pub const CAP: Duration = Duration::from_secs(30);

    pub fn new() -> Self {
        Self { next: Self::INITIAL }
    }

    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(Self::CAP);
        d
    }

    pub fn reset(&mut self) {
        self.next = Self::INITIAL;
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> DeviceKey {
        DeviceKey::from_bytes([7; 16])
    }

    #[test]
    fn backoff_doubles_to_cap() {
        let mut b = Backoff::new();
        let secs: Vec<u64> = (0..8).map(|_| b.next_delay().as_secs()).collect();
        assert_eq!(secs, vec![1, 2, 4, 8, 16, 30, 30, 30]);
        b.reset();
        assert_eq!(b.next_delay().as_secs(), 1);
    }

    #[test]
    fn opening_frames_subscribe_then_hello() {
        let p = Provisioner::new("d1", key());
        let f = p.opening_frames(1);
        assert_eq!(f.len(), 5);
        assert_eq!(f[0], Frame::Sub { filter: "devices/d1/config/type".into() });
        assert!(matches!(&f[4], Frame::Pub { topic, qos: 1, .. } if topic == "devices/d1/hello"));
    }

    #[test]
    fn completes_only_with_all_three_parts() {
        let mut p = Provisioner::new("d1", key());
        let msgs = [
            ("devices/d1/config/type", r#"{"device_type":"coordinator"}"#),
            ("devices/d1/config/location", r#"{"location_id":"L1","activity_name":"Museum"}"#),
            ("devices/d1/config/constants", r#"{"delta_threshold":2.0}"#),
        ];
        for (i, (t, body)) in msgs.iter().enumerate() {
            assert!(p.config().is_none());
            p.accept(ConfigMessage::parse("d1", t, body).unwrap().unwrap());
            assert_eq!(p.is_complete(), i == 2);
        }
        let c = p.config().unwrap();
        assert_eq!(c.location_id.as_deref(), Some("L1"));
        assert_eq!(c.delta_threshold(), 2.0);
    }

    #[test]
    fn ignores_foreign_topics_and_rejects_bad_payloads() {
        assert_eq!(ConfigMessage::parse("d1", "devices/d2/config/type", "{}"), Ok(None));
        assert!(ConfigMessage::parse("d1", "devices/d1/config/type", "nope").is_err());
        let bad = r#"{"device_id":"d2","key":"00000000000000000000000000000000"}"#;
        assert_eq!(ConfigMessage::parse("d1", "devices/d1/key", bad), Err(ProvisionError::BadKey));
    }
}
