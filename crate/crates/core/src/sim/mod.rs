//! Deterministic simulation of underwater sensor networks and their gateways.

pub mod channel;
pub mod config;
pub mod energy;
pub mod frame;
pub mod gateway;
pub mod process;
pub mod rng;
pub mod signal;
pub mod world;

pub use config::WorldSpec;
pub use world::{SimEvent, Uplink, World};
