//! Scenario files: the simulated world plus platform settings, validated at
//! load.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::broker::engine::BrokerConfig;
use crate::broker::packet::QoS;
use crate::broker::topic::TopicFilter;
use crate::broker::transport::LinkProfile;
use crate::identity::{issue_token, Action, Grant, Principal, PrincipalStore, Role, SigningKey};
use crate::ingestion::wire::WireFormat;
use crate::model::DataCategory;
use crate::monitoring::SloRule;
use crate::qc::QcConfig;
use crate::sim::config::{FaultEvent, FaultKind, GatewayDelivery, NodeSpec, OrgSpec, PlatformSpec, WorldSpec};
use crate::time::{Timestamp, DEFAULT_EPOCH};
use crate::triage::TriagePolicy;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}: {}", self.path, self.reason)
        } else {
            write!(f, "{}: {}: {}", self.path, self.field, self.reason)
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn new(path: &str, field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            path: path.to_owned(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestionTrace {
    /// The gateway pushes each record to the platform's push endpoint.
    Pusher,
    /// Records land in the organization's own archive; the platform polls it.
    Fetcher,
    /// An adapter beside the gateway publishes straight to the ingestion broker.
    Edge,
}

fn default_qos() -> QoS {
    QoS::AtLeastOnce
}

fn default_retransmit_s() -> f64 {
    5.0
}

fn default_poll_s() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformConfig {
    pub platform_id: String,
    /// Expected reporting interval of every stream on the platform.
    pub cadence_s: f64,
    pub nodes: Vec<NodeSpec>,
    pub gateway: NodeSpec,
    #[serde(default = "default_qos")]
    pub qos: QoS,
    #[serde(default = "default_retransmit_s")]
    pub retransmit_timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrgConfig {
    pub org_id: String,
    pub ingestion_trace: IngestionTrace,
    pub wire_format: WireFormat,
    #[serde(default = "default_poll_s")]
    pub fetch_poll_s: f64,
    pub platforms: Vec<PlatformConfig>,
}

/// Fault scripted relative to the scenario start, attached by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultScript {
    /// Sensor id for sensor faults, node id for NodeDead and LinkDown.
    pub target: String,
    pub kind: FaultKind,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default)]
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalConfig {
    pub principal_id: String,
    pub org_id: String,
    pub roles: Vec<Role>,
    /// Shorthand for Subscribe and QueryPull grants over these categories.
    #[serde(default)]
    pub categories: Vec<DataCategory>,
    #[serde(default)]
    pub grants: Vec<Grant>,
    /// Filters subscribed on the core broker during a run.
    #[serde(default)]
    pub subscriptions: Vec<String>,
}

/// Principal that pushes on behalf of an organization.
pub fn producer_id(org_id: &str) -> String {
    format!("producer-{org_id}")
}

impl PrincipalConfig {
    pub fn principal(&self) -> Principal {
        Principal::new(&self.principal_id, &self.org_id, &self.roles)
    }

    pub fn all_grants(&self) -> Vec<Grant> {
        let mut g = self.grants.clone();
        if !self.categories.is_empty() {
            g.push(Grant::categories(Action::Subscribe, &self.categories));
            g.push(Grant::categories(Action::QueryPull, &self.categories));
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    /// Links between ingestion clients and the ingestion broker.
    pub ingest: LinkProfile,
    /// Links between external consumers and the core broker.
    pub consumers: LinkProfile,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            ingest: LinkProfile::lossless(),
            consumers: LinkProfile::lossless(),
        }
    }
}

/// Either epoch milliseconds or RFC 3339 text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSpec {
    Millis(i64),
    Text(String),
}

impl TimeSpec {
    pub fn resolve(&self) -> Option<Timestamp> {
        match self {
            TimeSpec::Millis(ms) => Some(Timestamp(*ms)),
            TimeSpec::Text(s) => Timestamp::parse_rfc3339(s),
        }
    }
}

fn default_start() -> TimeSpec {
    TimeSpec::Millis(DEFAULT_EPOCH.millis())
}

fn default_tick_s() -> f64 {
    60.0
}

fn default_metrics_s() -> f64 {
    3600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: TimeSpec,
    /// Virtual seconds of sampling.
    pub duration_s: f64,
    #[serde(default)]
    pub organizations: Vec<OrgConfig>,
    #[serde(default)]
    pub faults: Vec<FaultScript>,
    #[serde(default)]
    pub qc: QcConfig,
    #[serde(default)]
    pub triage: TriagePolicy,
    #[serde(default)]
    pub principals: Vec<PrincipalConfig>,
    #[serde(default)]
    pub slos: Vec<SloRule>,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub broker: BrokerConfig,
    /// Interval of completeness checks.
    #[serde(default = "default_tick_s")]
    pub qc_tick_s: f64,
    /// Interval between metric expositions kept for the run.
    #[serde(default = "default_metrics_s")]
    pub metrics_interval_s: f64,
}

impl ScenarioConfig {
    /// A scenario with no organizations.
    pub fn empty(seed: u64, duration_s: f64) -> Self {
        ScenarioConfig {
            name: "empty".into(),
            seed,
            start: default_start(),
            duration_s,
            organizations: Vec::new(),
            faults: Vec::new(),
            qc: QcConfig::default(),
            triage: TriagePolicy::default(),
            principals: Vec::new(),
            slos: Vec::new(),
            transport: TransportConfig::default(),
            broker: BrokerConfig::default(),
            qc_tick_s: default_tick_s(),
            metrics_interval_s: default_metrics_s(),
        }
    }

    pub fn start_time(&self) -> Timestamp {
        self.start.resolve().unwrap_or(DEFAULT_EPOCH)
    }

    pub fn end_time(&self) -> Timestamp {
        self.start_time().plus_secs(self.duration_s)
    }

    /// Every principal the scenario knows with the grants its tokens carry:
    /// one producer per organization, then the configured principals.
    pub fn directory(&self) -> Vec<(Principal, Vec<Grant>)> {
        let producers = self.organizations.iter().map(|o| {
            let own = format!("ingest/{}/#", o.org_id);
            (
                Principal::new(producer_id(&o.org_id), &o.org_id, &[Role::Producer]),
                vec![Grant::topic(Action::Ingest, &own), Grant::topic(Action::Publish, &own)],
            )
        });
        producers
            .chain(self.principals.iter().map(|p| (p.principal(), p.all_grants())))
            .collect()
    }

    pub fn org(&self, org_id: &str) -> Option<&OrgConfig> {
        self.organizations.iter().find(|o| o.org_id == org_id)
    }

    /// The simulated world this scenario describes, with scripted faults
    /// attached to their targets.
    pub fn world_spec(&self) -> Result<WorldSpec, ConfigError> {
        self.world_spec_at("<scenario>")
    }

    fn world_spec_at(&self, path: &str) -> Result<WorldSpec, ConfigError> {
        let start = self.start_time();
        let mut orgs: Vec<OrgSpec> = self
            .organizations
            .iter()
            .map(|o| OrgSpec {
                org_id: o.org_id.clone(),
                wire_format: o.wire_format,
                delivery: match o.ingestion_trace {
                    IngestionTrace::Edge => GatewayDelivery::Edge,
                    IngestionTrace::Pusher | IngestionTrace::Fetcher => GatewayDelivery::Ota,
                },
                platforms: o
                    .platforms
                    .iter()
                    .map(|p| PlatformSpec {
                        platform_id: p.platform_id.clone(),
                        nodes: p.nodes.clone(),
                        gateway: p.gateway.clone(),
                        qos: p.qos,
                        retransmit_timeout_s: p.retransmit_timeout_s,
                    })
                    .collect(),
            })
            .collect();
        for (i, f) in self.faults.iter().enumerate() {
            let field = format!("faults[{i}]");
            if !(f.start_s >= 0.0 && f.end_s > f.start_s) {
                return Err(ConfigError::new(path, format!("{field}.end_s"), "need 0 <= start_s < end_s"));
            }
            let ev = FaultEvent {
                kind: f.kind,
                start: start.plus_secs(f.start_s),
                end: start.plus_secs(f.end_s),
                magnitude: f.magnitude,
            };
            let nodes = orgs
                .iter_mut()
                .flat_map(|o| o.platforms.iter_mut())
                .flat_map(|p| std::iter::once(&mut p.gateway).chain(p.nodes.iter_mut()));
            let mut attached = false;
            for n in nodes {
                if f.kind.is_sensor_fault() {
                    if let Some(s) = n.sensors.iter_mut().find(|s| s.sensor_id == f.target) {
                        s.fault_plan.push(ev.clone());
                        attached = true;
                    }
                } else if n.node_id == f.target {
                    n.faults.push(ev.clone());
                    attached = true;
                }
            }
            if !attached {
                let what = if f.kind.is_sensor_fault() { "sensor" } else { "node" };
                return Err(ConfigError::new(
                    path,
                    format!("{field}.target"),
                    format!("unknown {what} {:?}", f.target),
                ));
            }
        }
        Ok(WorldSpec {
            seed: self.seed,
            start,
            sampling_end: Some(self.end_time()),
            orgs,
        })
    }

    /// Checks every load-time invariant; `path` names the source in errors.
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        let e = |field: &str, reason: &str| ConfigError::new(path, field, reason);
        if self.start.resolve().is_none() {
            return Err(e("start", "not a timestamp"));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(e("duration_s", "must be a non-negative number of seconds"));
        }
        if !(self.qc_tick_s > 0.0) {
            return Err(e("qc_tick_s", "must be positive"));
        }
        if !(self.metrics_interval_s > 0.0) {
            return Err(e("metrics_interval_s", "must be positive"));
        }
        for (oi, o) in self.organizations.iter().enumerate() {
            if !(o.fetch_poll_s > 0.0) {
                return Err(e(&format!("organizations[{oi}].fetch_poll_s"), "must be positive"));
            }
            if !topic_safe(&o.org_id) {
                return Err(e(&format!("organizations[{oi}].org_id"), "must be a non-empty topic level"));
            }
            for (pi, p) in o.platforms.iter().enumerate() {
                let pp = format!("organizations[{oi}].platforms[{pi}]");
                if !topic_safe(&p.platform_id) {
                    return Err(e(&format!("{pp}.platform_id"), "must be a non-empty topic level"));
                }
                if !(p.cadence_s > 0.0) {
                    return Err(e(&format!("{pp}.cadence_s"), "must be positive"));
                }
                for n in &p.nodes {
                    for s in &n.sensors {
                        if p.cadence_s < s.sampling_interval_s {
                            return Err(e(
                                &format!("{pp}.cadence_s"),
                                &format!("shorter than {}'s sampling interval", s.sensor_id),
                            ));
                        }
                        if !topic_safe(&s.parameter) {
                            return Err(e(&format!("{pp}.{}.parameter", s.sensor_id), "must be a topic level"));
                        }
                    }
                }
            }
        }
        let world = self.world_spec_at(path)?;
        world.validate().map_err(|w| ConfigError::new(path, w.path, w.reason))?;
        self.qc.validate().map_err(|r| e("qc", &r))?;
        for (i, s) in self.slos.iter().enumerate() {
            s.validate().map_err(|r| e(&format!("slos[{i}]"), &r))?;
        }
        let mut ids = BTreeSet::new();
        let mut store = PrincipalStore::new();
        for p in &self.principals {
            store.insert(p.principal());
        }
        let key = SigningKey::new("validation");
        for (i, p) in self.principals.iter().enumerate() {
            let field = format!("principals[{i}]");
            if p.principal_id.is_empty() || !ids.insert(p.principal_id.clone()) {
                return Err(e(&format!("{field}.principal_id"), "empty or duplicate"));
            }
            for (j, f) in p.subscriptions.iter().enumerate() {
                TopicFilter::new(f.as_str()).map_err(|x| e(&format!("{field}.subscriptions[{j}]"), &x.to_string()))?;
            }
            issue_token(&store, &p.principal_id, p.all_grants(), 60, self.start_time(), &key)
                .map_err(|x| e(&format!("{field}.grants"), &x.to_string()))?;
        }
        Ok(())
    }
}

fn topic_safe(s: &str) -> bool {
    !s.is_empty() && !s.contains(['/', '+', '#', '\0'])
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|x| ConfigError::new(&shown, "", x.to_string()))?;
    parse_scenario(&text, &shown)
}

/// Parses and validates scenario JSON; `path` names the source in errors.
pub fn parse_scenario(text: &str, path: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|x| {
        ConfigError::new(path, format!("line {} column {}", x.line(), x.column()), x.to_string())
    })?;
    cfg.validate(path)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NODE: &str = r#"{"node_id":"n1","role":"sensing","battery_j":1000,
        "location":{"lat":41.1,"lon":-8.7,"depth_m":5},
        "uplink":{"kind":"Serial","bandwidth_bps":9600},
        "sensors":[{"sensor_id":"s1","parameter":"temperature","unit":"Cel",
          "sampling_interval_s":1800,"valid_range":{"min":-2,"max":35},
          "signal":{"base":14}}]}"#;
    const GW: &str = r#"{"node_id":"g1","role":"gateway","battery_j":1000,
        "location":{"lat":41.1,"lon":-8.7,"depth_m":0},
        "uplink":{"kind":"OTA","bandwidth_bps":1000000}}"#;

    fn scenario(extra: &str, cadence: u32) -> String {
        format!(
            r#"{{"seed":1,"duration_s":3600,"organizations":[{{"org_id":"org7",
            "ingestion_trace":"pusher","wire_format":"JsonV1","platforms":[
            {{"platform_id":"p1","cadence_s":{cadence},"nodes":[{NODE}],"gateway":{GW}}}]}}]{extra}}}"#
        )
    }

    #[test]
    fn minimal_loads() {
        let c = parse_scenario(&scenario("", 1800), "t.json").unwrap();
        assert_eq!(c.start_time(), DEFAULT_EPOCH);
        assert_eq!(c.organizations[0].platforms[0].cadence_s, 1800.0);
        assert_eq!(c.world_spec().unwrap().sampling_end, Some(DEFAULT_EPOCH.plus_secs(3600.0)));
    }

    #[test]
    fn unknown_sensor_ref_rejected() {
        let text = scenario(
            r#","faults":[{"target":"nope","kind":"spike","start_s":0,"end_s":60,"magnitude":5}]"#,
            1800,
        );
        let err = parse_scenario(&text, "t.json").unwrap_err();
        assert_eq!(err.path, "t.json");
        assert_eq!(err.field, "faults[0].target");
    }

    #[test]
    fn fault_attaches_to_sensor() {
        let text = scenario(
            r#","faults":[{"target":"s1","kind":"spike","start_s":3600,"end_s":3660,"magnitude":5}]"#,
            1800,
        );
        let w = parse_scenario(&text, "t.json").unwrap().world_spec().unwrap();
        let plan = &w.orgs[0].platforms[0].nodes[0].sensors[0].fault_plan;
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].start, DEFAULT_EPOCH.plus_secs(3600.0));
    }

    #[test]
    fn cadence_below_sampling_rejected() {
        let err = parse_scenario(&scenario("", 600), "t.json").unwrap_err();
        assert!(err.field.ends_with("cadence_s"), "{err}");
    }

    #[test]
    fn unknown_field_and_bad_grant() {
        assert!(parse_scenario(&scenario(r#","bogus":1"#, 1800), "t.json").is_err());
        let text = scenario(
            r#","principals":[{"principal_id":"c","org_id":"x","roles":["consumer"],
               "grants":[{"action":"publish","topic":"data/#"}]}]"#,
            1800,
        );
        let err = parse_scenario(&text, "t.json").unwrap_err();
        assert_eq!(err.field, "principals[0].grants");
    }
}
