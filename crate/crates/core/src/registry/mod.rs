//! Users, activities, device associations and one-time pairing codes.
//!
//! This is plain state: no clocks, sockets or files. Callers pass the time
//! and a random source, and persist [`RegistryData`] after mutations.

mod geo;
mod password;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geo::{haversine_m, valid_coordinates, GeocodeError, Geocoder, StubGeocoder, EARTH_RADIUS_M};
pub use password::{hash_password, verify_password, DEFAULT_ITERATIONS};

use crate::thermal::is_valid_id;

pub const TOKEN_TTL_MS: u64 = 24 * 60 * 60 * 1000;
pub const OTP_TTL_MS: u64 = 300 * 1000;
pub const MIN_PASSWORD_CHARS: usize = 8;
pub const MAX_NEARBY_RADIUS_M: f64 = 100_000.0;
const MAX_NAME_CHARS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Unauthorized(String),
    #[error("not permitted for this role")]
    Forbidden,
    #[error("not found")]
    NotFound,
    #[error("{0}")]
    Conflict(String),
}

impl RegistryError {
    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        match self {
            RegistryError::Invalid(_) => 400,
            RegistryError::Unauthorized(_) => 401,
            RegistryError::Forbidden => 403,
            RegistryError::NotFound => 404,
            RegistryError::Conflict(_) => 409,
        }
    }
}

fn invalid(msg: impl Into<String>) -> RegistryError {
    RegistryError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Standard,
    Business,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: String,
    pub email: String,
    pub password_hash: String,
    pub role: Role,
}

fn yes() -> bool {
    true
}

/// Which activity details non-owners may see. A non-public activity is
/// invisible to everyone but its owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility {
    #[serde(default = "yes")]
    pub public: bool,
    #[serde(default = "yes")]
    pub address: bool,
    #[serde(default = "yes")]
    pub capacity: bool,
}

impl Default for Visibility {
    fn default() -> Self {
        Self {
            public: true,
            address: true,
            capacity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub activity_id: String,
    pub owner_id: String,
    pub name: String,
    pub address: String,
    pub lat: f64,
    pub lon: f64,
    pub capacity: u32,
    pub visibility: Visibility,
}

/// What a non-owner sees of an activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicActivity {
    pub activity_id: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
}

impl Activity {
    pub fn public_view(&self) -> PublicActivity {
        PublicActivity {
            activity_id: self.activity_id.clone(),
            name: self.name.clone(),
            lat: self.lat,
            lon: self.lon,
            address: self.visibility.address.then(|| self.address.clone()),
            capacity: self.visibility.capacity.then_some(self.capacity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtpGrant {
    pub otp: String,
    pub activity_id: String,
    pub issued_ms: u64,
    pub used: bool,
}

impl OtpGrant {
    pub fn expires_ms(&self) -> u64 {
        self.issued_ms + OTP_TTL_MS
    }

    pub fn is_expired(&self, now_ms: u64) -> bool {
        now_ms >= self.expires_ms()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewActivity {
    pub name: String,
    pub address: String,
    pub capacity: u32,
    #[serde(default)]
    pub visibility: Visibility,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivityPatch {
    pub name: Option<String>,
    pub address: Option<String>,
    pub capacity: Option<u32>,
    pub visibility: Option<Visibility>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrant {
    pub token: String,
    pub user_id: String,
    pub role: Role,
    pub expires_ms: u64,
}

/// Everything that survives a restart. Session tokens deliberately do not.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryData {
    pub users: BTreeMap<String, User>,
    pub activities: BTreeMap<String, Activity>,
    pub otps: Vec<OtpGrant>,
    /// device_id -> activity_id
    pub associations: BTreeMap<String, String>,
    pub next_user: u64,
    pub next_activity: u64,
}

#[derive(Debug, Clone)]
struct Session {
    user_id: String,
    expires_ms: u64,
}

pub struct Registry {
    data: RegistryData,
    sessions: HashMap<String, Session>,
    geocoder: Box<dyn Geocoder>,
    business_emails: BTreeSet<String>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("users", &self.data.users.len())
            .field("activities", &self.data.activities.len())
            .field("sessions", &self.sessions.len())
            .finish()
    }
}

fn normalize_email(email: &str) -> String {
    email.trim().to_lowercase()
}

fn email_is_valid(email: &str) -> bool {
    let Some((local, domain)) = email.split_once('@') else {
        return false;
    };
    !local.is_empty()
        && !domain.contains('@')
        && domain.contains('.')
        && !domain.starts_with('.')
        && !domain.ends_with('.')
        && !email.chars().any(char::is_whitespace)
}

fn validate_name(name: &str) -> Result<(), RegistryError> {
    let n = name.trim().chars().count();
    if n == 0 || n > MAX_NAME_CHARS {
        return Err(invalid(format!("name must be 1..={MAX_NAME_CHARS} characters")));
    }
    Ok(())
}

fn validate_capacity(capacity: u32) -> Result<(), RegistryError> {
    if capacity == 0 {
        return Err(invalid("capacity must be positive"));
    }
    Ok(())
}

impl Registry {
    pub fn new(geocoder: Box<dyn Geocoder>) -> Self {
        Self::from_data(RegistryData::default(), geocoder)
    }

    pub fn from_data(data: RegistryData, geocoder: Box<dyn Geocoder>) -> Self {
        Self {
            data,
            sessions: HashMap::new(),
            geocoder,
            business_emails: BTreeSet::new(),
        }
    }

    pub fn data(&self) -> &RegistryData {
        &self.data
    }

    /// Emails that receive the business role, now and on registration.
    /// Returns true if an existing user changed role.
    pub fn grant_business(&mut self, email: &str) -> bool {
        let email = normalize_email(email);
        self.business_emails.insert(email.clone());
        match self.data.users.values_mut().find(|u| u.email == email) {
            Some(u) if u.role != Role::Business => {
                u.role = Role::Business;
                true
            }
            _ => false,
        }
    }

    pub fn validate_registration(email: &str, password: &str) -> Result<(), RegistryError> {
        if !email_is_valid(email.trim()) {
            return Err(invalid("invalid email address"));
        }
        if password.chars().count() < MIN_PASSWORD_CHARS {
            return Err(invalid(format!("password must have at least {MIN_PASSWORD_CHARS} characters")));
        }
        Ok(())
    }

    pub fn email_taken(&self, email: &str) -> bool {
        let email = normalize_email(email);
        self.data.users.values().any(|u| u.email == email)
    }

    /// Stores a user whose password was already hashed.
    pub fn add_user(&mut self, email: &str, password_hash: String) -> Result<User, RegistryError> {
        if !email_is_valid(email.trim()) {
            return Err(invalid("invalid email address"));
        }
        if self.email_taken(email) {
            return Err(RegistryError::Conflict("email already registered".into()));
        }
        let email = normalize_email(email);
        self.data.next_user += 1;
        let role = if self.business_emails.contains(&email) {
            Role::Business
        } else {
            Role::Standard
        };
        let user = User {
            user_id: format!("u-{}", self.data.next_user),
            email,
            password_hash,
            role,
        };
        self.data.users.insert(user.user_id.clone(), user.clone());
        Ok(user)
    }

    /// `(user_id, password_hash)` for an email.
    pub fn credentials(&self, email: &str) -> Option<(String, String)> {
        let email = normalize_email(email);
        self.data
            .users
            .values()
            .find(|u| u.email == email)
            .map(|u| (u.user_id.clone(), u.password_hash.clone()))
    }

    pub fn issue_token<R: Rng + ?Sized>(&mut self, user_id: &str, now_ms: u64, rng: &mut R) -> Result<TokenGrant, RegistryError> {
        let user = self
            .data
            .users
            .get(user_id)
            .ok_or_else(|| RegistryError::Unauthorized("invalid credentials".into()))?;
        self.sessions.retain(|_, s| now_ms < s.expires_ms);
        let token = hex::encode(rng.random::<[u8; 16]>());
        let expires_ms = now_ms + TOKEN_TTL_MS;
        self.sessions.insert(
            token.clone(),
            Session {
                user_id: user_id.to_owned(),
                expires_ms,
            },
        );
        Ok(TokenGrant {
            token,
            user_id: user.user_id.clone(),
            role: user.role,
            expires_ms,
        })
    }

    pub fn user_for_token(&self, token: &str, now_ms: u64) -> Result<&User, RegistryError> {
        let s = self
            .sessions
            .get(token)
            .ok_or_else(|| RegistryError::Unauthorized("invalid token".into()))?;
        if now_ms >= s.expires_ms {
            return Err(RegistryError::Unauthorized("token expired".into()));
        }
        self.data
            .users
            .get(&s.user_id)
            .ok_or_else(|| RegistryError::Unauthorized("invalid token".into()))
    }

    pub fn business_user(&self, token: &str, now_ms: u64) -> Result<&User, RegistryError> {
        let u = self.user_for_token(token, now_ms)?;
        if u.role != Role::Business {
            return Err(RegistryError::Forbidden);
        }
        Ok(u)
    }

    pub fn activity(&self, activity_id: &str) -> Option<&Activity> {
        self.data.activities.get(activity_id)
    }

    pub fn activities(&self) -> impl Iterator<Item = &Activity> {
        self.data.activities.values()
    }

    /// An activity the viewer may see: public ones, or the viewer's own.
    pub fn viewable_activity(&self, activity_id: &str, viewer: Option<&str>) -> Result<&Activity, RegistryError> {
        match self.data.activities.get(activity_id) {
            Some(a) if a.visibility.public || viewer == Some(a.owner_id.as_str()) => Ok(a),
            _ => Err(RegistryError::NotFound),
        }
    }

    pub fn owned_activity(&self, owner_id: &str, activity_id: &str) -> Result<&Activity, RegistryError> {
        match self.data.activities.get(activity_id) {
            Some(a) if a.owner_id == owner_id => Ok(a),
            _ => Err(RegistryError::NotFound),
        }
    }

    fn resolve(&self, address: &str) -> Result<(f64, f64), RegistryError> {
        let (lat, lon) = self
            .geocoder
            .geocode(address)
            .map_err(|e| invalid(e.to_string()))?;
        if !valid_coordinates(lat, lon) {
            return Err(invalid("geocoder returned invalid coordinates"));
        }
        Ok((lat, lon))
    }

    pub fn create_activity(&mut self, owner_id: &str, req: NewActivity) -> Result<Activity, RegistryError> {
        validate_name(&req.name)?;
        validate_capacity(req.capacity)?;
        let (lat, lon) = self.resolve(&req.address)?;
        self.data.next_activity += 1;
        let a = Activity {
            activity_id: format!("act-{}", self.data.next_activity),
            owner_id: owner_id.to_owned(),
            name: req.name.trim().to_owned(),
            address: req.address,
            lat,
            lon,
            capacity: req.capacity,
            visibility: req.visibility,
        };
        self.data.activities.insert(a.activity_id.clone(), a.clone());
        Ok(a)
    }

    pub fn update_activity(&mut self, owner_id: &str, activity_id: &str, patch: ActivityPatch) -> Result<Activity, RegistryError> {
        let mut a = self.owned_activity(owner_id, activity_id)?.clone();
        if let Some(name) = patch.name {
            validate_name(&name)?;
            a.name = name.trim().to_owned();
        }
        if let Some(capacity) = patch.capacity {
            validate_capacity(capacity)?;
            a.capacity = capacity;
        }
        if let Some(address) = patch.address {
            (a.lat, a.lon) = self.resolve(&address)?;
            a.address = address;
        }
        if let Some(v) = patch.visibility {
            a.visibility = v;
        }
        self.data.activities.insert(a.activity_id.clone(), a.clone());
        Ok(a)
    }

    pub fn issue_otp<R: Rng + ?Sized>(&mut self, owner_id: &str, activity_id: &str, now_ms: u64, rng: &mut R) -> Result<OtpGrant, RegistryError> {
        self.owned_activity(owner_id, activity_id)?;
        self.data.otps.retain(|g| !g.is_expired(now_ms));
        let otp = loop {
            let code = format!("{:06}", rng.random_range(0..1_000_000u32));
            if self.data.otps.iter().all(|g| g.otp != code) {
                break code;
            }
        };
        let grant = OtpGrant {
            otp,
            activity_id: activity_id.to_owned(),
            issued_ms: now_ms,
            used: false,
        };
        self.data.otps.push(grant.clone());
        Ok(grant)
    }

    /// Binds a device to the activity an OTP was issued for and consumes
    /// the OTP. `device_known` says whether the device is whitelisted.
    pub fn associate(&mut self, device_id: &str, otp: &str, now_ms: u64, device_known: bool) -> Result<Activity, RegistryError> {
        if !is_valid_id(device_id) {
            return Err(invalid("invalid device id"));
        }
        let idx = self
            .data
            .otps
            .iter()
            .rposition(|g| g.otp == otp)
            .ok_or_else(|| RegistryError::Unauthorized("unknown OTP".into()))?;
        let grant = &self.data.otps[idx];
        if grant.used {
            return Err(RegistryError::Unauthorized("OTP already used".into()));
        }
        if grant.is_expired(now_ms) {
            return Err(RegistryError::Unauthorized("OTP expired".into()));
        }
        if !device_known {
            return Err(RegistryError::NotFound);
        }
        if let Some(current) = self.data.associations.get(device_id) {
            return Err(RegistryError::Conflict(format!(
                "device already associated with {current}; dissociate it first"
            )));
        }
        let activity = self
            .data
            .activities
            .get(&grant.activity_id)
            .cloned()
            .ok_or(RegistryError::NotFound)?;
        self.data.otps[idx].used = true;
        self.data
            .associations
            .insert(device_id.to_owned(), activity.activity_id.clone());
        Ok(activity)
    }

    /// Removes a device from one of the owner's activities.
    pub fn dissociate(&mut self, owner_id: &str, device_id: &str) -> Result<String, RegistryError> {
        let activity_id = self
            .data
            .associations
            .get(device_id)
            .cloned()
            .ok_or(RegistryError::NotFound)?;
        self.owned_activity(owner_id, &activity_id)?;
        self.data.associations.remove(device_id);
        Ok(activity_id)
    }

    pub fn device_location(&self, device_id: &str) -> Option<&str> {
        self.data.associations.get(device_id).map(String::as_str)
    }

    pub fn devices_of(&self, activity_id: &str) -> Vec<String> {
        self.data
            .associations
            .iter()
            .filter(|(_, a)| *a == activity_id)
            .map(|(d, _)| d.clone())
            .collect()
    }

    /// Public activities within `radius_m`, nearest first.
    pub fn nearby(&self, lat: f64, lon: f64, radius_m: f64) -> Result<Vec<(&Activity, f64)>, RegistryError> {
        if !valid_coordinates(lat, lon) {
            return Err(invalid("invalid coordinates"));
        }
        if !(radius_m > 0.0 && radius_m <= MAX_NEARBY_RADIUS_M) {
            return Err(invalid(format!("radius must be in (0, {MAX_NEARBY_RADIUS_M}] metres")));
        }
        let mut hits: Vec<(&Activity, f64)> = self
            .data
            .activities
            .values()
            .filter(|a| a.visibility.public)
            .map(|a| (a, haversine_m((lat, lon), (a.lat, a.lon))))
            .filter(|(_, d)| *d <= radius_m)
            .collect();
        hits.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.activity_id.cmp(&y.0.activity_id)));
        Ok(hits)
    }
}
