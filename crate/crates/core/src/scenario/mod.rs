//! End-to-end harness: scenario files, the deterministic runner and the run
//! report.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{load_scenario, parse_scenario, producer_id, ConfigError, IngestionTrace, PrincipalConfig, ScenarioConfig};
pub use report::{report, OrgCounts, ReportFormat, RunReport};
pub use runner::{run, run_key, Run, RunOverrides};
