//! Socket front ends: the broker listener, the HTTP API and the
//! coordinator link.

pub mod device;
pub mod http;
pub mod server;

pub use device::{DeviceHandle, IngestError, IngestStats, Ingestor, LinkError, LinkOptions, LinkStatus};
pub use http::{Api, HttpServer, Request, Response, DEFAULT_WORKERS};
pub use server::{BrokerServer, Node, TICK_INTERVAL};
