//! Address geocoding and great-circle distances.

use std::collections::BTreeMap;

use thiserror::Error;

/// Mean Earth radius used for distances.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

const BUILTIN_TABLE: &str = include_str!("../../data/geocoder.tsv");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeocodeError {
    #[error("address not found: {0:?}")]
    NotFound(String),
    #[error("geocoder table line {line}: {reason}")]
    Table { line: usize, reason: String },
}

pub trait Geocoder: Send + Sync {
    /// `(lat, lon)` in degrees.
    fn geocode(&self, address: &str) -> Result<(f64, f64), GeocodeError>;
}

fn normalize(address: &str) -> String {
    address
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Fixed lookup table; addresses match case-insensitively with collapsed
/// whitespace.
#[derive(Debug, Clone)]
pub struct StubGeocoder {
    table: BTreeMap<String, (f64, f64)>,
}

impl StubGeocoder {
    /// Parses `address<TAB>lat<TAB>lon` lines; `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self, GeocodeError> {
        let mut table = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| GeocodeError::Table {
                line: n + 1,
                reason: reason.to_owned(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let [addr, lat, lon] = cols.as_slice() else {
                return Err(err("expected three tab-separated columns"));
            };
            let lat: f64 = lat.trim().parse().map_err(|_| err("bad latitude"))?;
            let lon: f64 = lon.trim().parse().map_err(|_| err("bad longitude"))?;
            if !valid_coordinates(lat, lon) {
                return Err(err("coordinates out of range"));
            }
            table.insert(normalize(addr), (lat, lon));
        }
        Ok(Self { table })
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TABLE).expect("bundled geocoder table is valid")
    }

    /// Adds the entries of another table, overriding duplicates.
    pub fn extend(&mut self, other: StubGeocoder) {
        self.table.extend(other.table);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Default for StubGeocoder {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Geocoder for StubGeocoder {
    fn geocode(&self, address: &str) -> Result<(f64, f64), GeocodeError> {
        self.table
            .get(&normalize(address))
            .copied()
            .ok_or_else(|| GeocodeError::NotFound(address.to_owned()))
    }
}

pub fn valid_coordinates(lat: f64, lon: f64) -> bool {
    lat.is_finite() && lon.is_finite() && lat.abs() <= 90.0 && lon.abs() <= 180.0
}

/// Great-circle distance in metres (haversine).
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2)
        + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}
