//! Device key whitelist with revocation and graceful rotation.
//!
//! Text form, one key per line (`#` starts a comment):
//!
//! ```text
//! door-1 8f14e45fceea167a5a36dedd4bea2543 coordinator active
//! door-1 c9f0f895fb98ab9159f51fd0297e236d coordinator retiring@1700000000000
//! door-2 45c48cce2e2d7fbdea1afc51c7c6ad26 coordinator revoked
//! ```
//!
//! A `retiring@<ms>` key still authenticates until the device connects with
//! its replacement or the grace period after `<ms>` elapses.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::thermal::is_valid_id;

pub const ROTATION_GRACE_MS: u64 = 60_000;
pub const DEFAULT_DEVICE_TYPE: &str = "coordinator";

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceKey([u8; 16]);

impl DeviceKey {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.random())
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl FromStr for DeviceKey {
    type Err = WhitelistError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 16];
        if s.len() != 32 {
            return Err(WhitelistError::BadKey);
        }
        hex::decode_to_slice(s, &mut out).map_err(|_| WhitelistError::BadKey)?;
        Ok(Self(out))
    }
}

impl fmt::Display for DeviceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for DeviceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Enough to tell keys apart in logs.
        write!(f, "DeviceKey({}..)", &self.to_hex()[..6])
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WhitelistError {
    #[error("device keys are 32 hex characters")]
    BadKey,
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("key already registered")]
    DuplicateKey,
    #[error("invalid device id {0:?}")]
    BadDeviceId(String),
    #[error("whitelist line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyStatus {
    Active,
    Retiring { since_ms: u64 },
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct KeyRecord {
    device_id: String,
    status: KeyStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Whitelist {
    keys: BTreeMap<DeviceKey, KeyRecord>,
    device_types: BTreeMap<String, String>,
}

impl Whitelist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_device(
        &mut self,
        device_id: &str,
        device_type: &str,
        key: DeviceKey,
    ) -> Result<(), WhitelistError> {
        if !is_valid_id(device_id) {
            return Err(WhitelistError::BadDeviceId(device_id.to_owned()));
        }
        if self.keys.contains_key(&key) {
            return Err(WhitelistError::DuplicateKey);
        }
        self.device_types
            .insert(device_id.to_owned(), device_type.to_owned());
        self.keys.insert(
            key,
            KeyRecord {
                device_id: device_id.to_owned(),
                status: KeyStatus::Active,
            },
        );
        Ok(())
    }

    pub fn has_device(&self, device_id: &str) -> bool {
        self.device_types.contains_key(device_id)
    }

    pub fn device_type(&self, device_id: &str) -> Option<&str> {
        self.device_types.get(device_id).map(String::as_str)
    }

    pub fn devices(&self) -> impl Iterator<Item = &str> {
        self.device_types.keys().map(String::as_str)
    }

    pub fn keys_of(&self, device_id: &str) -> Vec<(DeviceKey, KeyStatus)> {
        self.keys
            .iter()
            .filter(|(_, r)| r.device_id == device_id)
            .map(|(k, r)| (*k, r.status))
            .collect()
    }

    pub fn status(&self, key: &DeviceKey) -> Option<KeyStatus> {
        self.keys.get(key).map(|r| r.status)
    }

    /// Device bound to a key that may still authenticate.
    pub fn authenticate(&self, key: &DeviceKey) -> Option<&str> {
        self.keys
            .get(key)
            .filter(|r| r.status != KeyStatus::Revoked)
            .map(|r| r.device_id.as_str())
    }

    pub fn revoke(&mut self, key: &DeviceKey) -> bool {
        match self.keys.get_mut(key) {
            Some(r) if r.status != KeyStatus::Revoked => {
                r.status = KeyStatus::Revoked;
                true
            }
            _ => false,
        }
    }

    /// Registers `new_key` for the device and schedules every other live key
    /// of that device for retirement.
    pub fn begin_rotation(
        &mut self,
        device_id: &str,
        new_key: DeviceKey,
        now_ms: u64,
    ) -> Result<(), WhitelistError> {
        let device_type = self
            .device_type(device_id)
            .ok_or_else(|| WhitelistError::UnknownDevice(device_id.to_owned()))?
            .to_owned();
        if self.keys.contains_key(&new_key) {
            return Err(WhitelistError::DuplicateKey);
        }
        for r in self.keys.values_mut() {
            if r.device_id == device_id && r.status == KeyStatus::Active {
                r.status = KeyStatus::Retiring { since_ms: now_ms };
            }
        }
        self.add_device(device_id, &device_type, new_key)
    }

    /// Called after a successful authentication. Connecting with an active
    /// key completes any pending rotation; returns the keys revoked by it.
    pub fn on_authenticated(&mut self, key: &DeviceKey) -> Vec<DeviceKey> {
        let Some(record) = self.keys.get(key) else {
            return Vec::new();
        };
        if record.status != KeyStatus::Active {
            return Vec::new();
        }
        let device = record.device_id.clone();
        self.revoke_where(|r| {
            r.device_id == device && matches!(r.status, KeyStatus::Retiring { .. })
        })
    }

    /// Revokes retiring keys whose grace period has elapsed.
    pub fn expire(&mut self, now_ms: u64) -> Vec<DeviceKey> {
        self.revoke_where(|r| match r.status {
            KeyStatus::Retiring { since_ms } => now_ms >= since_ms + ROTATION_GRACE_MS,
            _ => false,
        })
    }

    fn revoke_where(&mut self, pred: impl Fn(&KeyRecord) -> bool) -> Vec<DeviceKey> {
        let mut out = Vec::new();
        for (key, r) in self.keys.iter_mut() {
            if pred(r) {
                r.status = KeyStatus::Revoked;
                out.push(*key);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, WhitelistError> {
        let mut wl = Whitelist::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| WhitelistError::Parse {
                line: n + 1,
                reason: reason.to_owned(),
            };
            let t: Vec<&str> = line.split_whitespace().collect();
            if !(2..=4).contains(&t.len()) {
                return Err(err("expected `device_id key [type] [status]`"));
            }
            let key: DeviceKey = t[1].parse().map_err(|_| err("bad key"))?;
            let device_type = t.get(2).copied().unwrap_or(DEFAULT_DEVICE_TYPE);
            let status = match t.get(3).copied().unwrap_or("active") {
                "active" => KeyStatus::Active,
                "revoked" => KeyStatus::Revoked,
                s => {
                    let ms = s
                        .strip_prefix("retiring@")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| err("bad status"))?;
                    KeyStatus::Retiring { since_ms: ms }
                }
            };
            wl.add_device(t[0], device_type, key)
                .map_err(|e| err(&e.to_string()))?;
            wl.keys.get_mut(&key).expect("just inserted").status = status;
        }
        Ok(wl)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# device_id key type status\n");
        for (key, r) in &self.keys {
            let status = match r.status {
                KeyStatus::Active => "active".to_owned(),
                KeyStatus::Revoked => "revoked".to_owned(),
                KeyStatus::Retiring { since_ms } => format!("retiring@{since_ms}"),
            };
            let ty = self.device_type(&r.device_id).unwrap_or(DEFAULT_DEVICE_TYPE);
            out.push_str(&format!("{} {} {} {}\n", r.device_id, key, ty, status));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> DeviceKey {
        DeviceKey::from_bytes([b; 16])
    }

    #[test]
    fn key_hex_parsing() {
        let k: DeviceKey = "000102030405060708090a0b0c0d0e0f".parse().unwrap();
        assert_eq!(k.to_hex(), "000102030405060708090a0b0c0d0e0f");
        assert!("0001".parse::<DeviceKey>().is_err());
        assert!("zz0102030405060708090a0b0c0d0e0f".parse::<DeviceKey>().is_err());
    }

    #[test]
    fn revoked_keys_never_authenticate() {
        let mut wl = Whitelist::new();
        wl.add_device("d1", "coordinator", key(1)).unwrap();
        assert_eq!(wl.authenticate(&key(1)), Some("d1"));
        assert!(wl.revoke(&key(1)));
        assert_eq!(wl.authenticate(&key(1)), None);
        assert_eq!(wl.authenticate(&key(9)), None);
    }

    #[test]
    fn rotation_completes_on_new_key_login() {
        let mut wl = Whitelist::new();
        wl.add_device("d1", "coordinator", key(1)).unwrap();
        wl.begin_rotation("d1", key(2), 1_000).unwrap();
        assert_eq!(wl.authenticate(&key(1)), Some("d1"));
        // Old key logging in does not complete the rotation.
        assert!(wl.on_authenticated(&key(1)).is_empty());
        assert_eq!(wl.on_authenticated(&key(2)), vec![key(1)]);
        assert_eq!(wl.authenticate(&key(1)), None);
    }

    #[test]
    fn rotation_grace_expires() {
        let mut wl = Whitelist::new();
        wl.add_device("d1", "coordinator", key(1)).unwrap();
        wl.begin_rotation("d1", key(2), 1_000).unwrap();
        assert!(wl.expire(1_000 + ROTATION_GRACE_MS - 1).is_empty());
        assert_eq!(wl.expire(1_000 + ROTATION_GRACE_MS), vec![key(1)]);
        assert!(wl.begin_rotation("nope", key(3), 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut wl = Whitelist::new();
        wl.add_device("d1", "coordinator", key(1)).unwrap();
        wl.add_device("d2", "grid-eye", key(2)).unwrap();
        wl.begin_rotation("d1", key(3), 77).unwrap();
        wl.revoke(&key(2));
        let text = wl.to_text();
        assert!(text.contains("retiring@77"));
        assert_eq!(Whitelist::parse(&text).unwrap(), wl);
        assert!(Whitelist::parse("d1 nothex").is_err());
        assert!(Whitelist::parse(&format!("d1 {} x weird", key(1))).is_err());
    }
}
