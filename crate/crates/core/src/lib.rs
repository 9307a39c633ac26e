//! Marine IoUT data platform: simulated underwater sensor networks feeding an
//! ingestion, quality-control, triage and access-controlled storage pipeline.

pub mod broker;
pub mod dataspace;
pub mod identity;
pub mod ingestion;
pub mod model;
pub mod monitoring;
pub mod qc;
pub mod scenario;
pub mod sim;
pub mod time;
pub mod transform;
pub mod triage;

pub use model::{AttributeFlag, DataCategory, LineageStep, Location, Observation, QcReport};
pub use time::{Millis, Timestamp};
