//! Pub/sub broker: whitelist authentication, QoS 1 routing, occupancy
//! bookkeeping and its persistence.

mod engine;
mod journal;
mod occupancy;
mod whitelist;

pub use engine::{
    is_retained, is_server_owned, Action, Broker, BrokerConfig, BrokerStats, ConnId, Inbound,
};
pub use journal::{Journal, JournalEntry, JournalError, Snapshot};
pub use occupancy::{ApplyOutcome, HistoryPoint, OccupancyState, OccupancyStore, UnknownLocation};
pub use whitelist::{
    DeviceKey, KeyStatus, Whitelist, WhitelistError, DEFAULT_DEVICE_TYPE, ROTATION_GRACE_MS,
};
