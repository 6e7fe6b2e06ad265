//! Location-side aggregation of flow events and their reliable delivery to
//! the broker.

mod device_file;
mod ledger;
mod provision;
mod publisher;
mod queue;

pub use device_file::{DeviceFile, DeviceFileError, SensorSpec};
pub use ledger::{DeltaUpdate, LedgerError, SensorEntry, SensorLedger};
pub use provision::{
    config_topic, hello_topic, key_topic, Backoff, ConfigMessage, DeviceConfig, ProvisionError,
    Provisioner, DELTA_THRESHOLD_KEY, PROVISION_TIMEOUT,
};
pub use publisher::{Publisher, PublisherStats, DEFAULT_RETRANSMIT_MS};
pub use queue::{DeltaQueue, QueueFull, DELTA_QUEUE_CAPACITY};
