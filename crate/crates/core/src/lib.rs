//! People-flow monitoring: thermal-sensor passage counting, pub/sub
//! coordination and an occupancy registry.

pub mod acquisition;
pub mod broker;
pub mod clock;
pub mod coordinator;
pub mod experiment;
pub mod flow;
pub mod hub;
pub mod net;
pub mod registry;
pub mod sim;
pub mod thermal;
pub mod topic;
pub mod wire;
