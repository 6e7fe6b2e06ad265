//! On-disk coordinator credentials.
//!
//! ```toml
//! device_id = "door-1"
//! device_key = "8f14e45fceea167a5a36dedd4bea2543"
//! broker = "127.0.0.1:1883"
//!
//! [[sensors]]
//! id = "door-1-main"
//! coverage = "main entrance"
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::DeviceKey;
use crate::thermal::is_valid_id;

#[derive(Debug, Error)]
pub enum DeviceFileError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid device file: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: String,
    #[serde(default)]
    pub coverage: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceFile {
    pub device_id: String,
    pub device_key: String,
    pub broker: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensors: Vec<SensorSpec>,
}

impl DeviceFile {
    pub fn key(&self) -> Result<DeviceKey, DeviceFileError> {
        self.device_key
            .parse()
            .map_err(|_| DeviceFileError::Invalid("device_key must be 32 hex characters".into()))
    }

    /// Declared sensors, or a single sensor named after the device.
    pub fn sensor_specs(&self) -> Vec<SensorSpec> {
        if self.sensors.is_empty() {
            vec![SensorSpec {
                id: self.device_id.clone(),
                coverage: String::new(),
            }]
        } else {
            self.sensors.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DeviceFileError> {
        if !is_valid_id(&self.device_id) {
            return Err(DeviceFileError::Invalid(format!("bad device_id {:?}", self.device_id)));
        }
        self.key()?;
        if let Some(s) = self.sensors.iter().find(|s| !is_valid_id(&s.id)) {
            return Err(DeviceFileError::Invalid(format!("bad sensor id {:?}", s.id)));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, DeviceFileError> {
        let f: DeviceFile = toml::from_str(text)?;
        f.validate()?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, DeviceFileError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("device file serializes")
    }

    /// Atomic replace, used when the server rotates the key.
    pub fn save(&self, path: &Path) -> Result<(), DeviceFileError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_toml())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let text = "device_id = \"door-1\"\ndevice_key = \"000102030405060708090a0b0c0d0e0f\"\nbroker = \"127.0.0.1:1883\"\n";
        let f = DeviceFile::parse(text).unwrap();
        assert_eq!(f.sensor_specs()[0].id, "door-1");
        assert_eq!(DeviceFile::parse(&f.to_toml()).unwrap(), f);
        assert!(DeviceFile::parse(&text.replace("0f\"", "\"")).is_err());
        assert!(DeviceFile::parse(&text.replace("door-1", "door 1")).is_err());
    }
}
