//! Run report and its text and JSON renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::broker::engine::BrokerStats;
use crate::monitoring::{format_value, SloBreach};
use crate::qc::AlarmKind;
use crate::sim::world::{GatewayCost, NodeEnergy};
use crate::time::Timestamp;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrgCounts {
    pub org_id: String,
    pub trace: String,
    pub samples: u64,
    pub suppressed: u64,
    pub frames_sent: u64,
    pub frames_lost: u64,
    pub readings_delivered: u64,
    pub readings_lost: u64,
    pub readings_buffered: u64,
    /// Records entering the ingestion layer (pushed, fetched or edge-integrated).
    pub records_received: u64,
    pub push_rejected: u64,
    /// Records reaching the transform stage.
    pub records_ingested: u64,
    pub transform_errors: u64,
    /// Dropped as duplicates, at transform or by the store.
    pub dedup_drops: u64,
    /// Non-missing observations that took a slot in the data space.
    pub observations_stored: u64,
    pub quarantined: u64,
    pub missing_synthesized: u64,
    pub missing_stored: u64,
    pub alarms: BTreeMap<String, u64>,
}

impl OrgCounts {
    pub fn new(org_id: &str, trace: &str) -> Self {
        OrgCounts {
            org_id: org_id.to_owned(),
            trace: trace.to_owned(),
            alarms: AlarmKind::ALL.iter().map(|k| (k.slug().to_owned(), 0)).collect(),
            ..OrgCounts::default()
        }
    }

    /// stored + transform errors + duplicates = ingested.
    pub fn invariant_holds(&self) -> bool {
        self.observations_stored + self.transform_errors + self.dedup_drops == self.records_ingested
    }

    pub fn alarms_of(&self, kind: AlarmKind) -> u64 {
        self.alarms.get(kind.slug()).copied().unwrap_or(0)
    }
}

/// What one principal saw on the push side (core broker subscriptions) and
/// the pull side (data space query), keyed by category slug, `quarantine`
/// or `alarms`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsumerCounts {
    pub principal_id: String,
    pub pushed: BTreeMap<String, u64>,
    pub pulled: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BrokerReport {
    pub ingest: BrokerStats,
    pub core: BrokerStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub start: Timestamp,
    pub end: Timestamp,
    pub duration_s: f64,
    pub orgs: Vec<OrgCounts>,
    pub energy: Vec<NodeEnergy>,
    pub ota: Vec<GatewayCost>,
    pub consumers: Vec<ConsumerCounts>,
    pub brokers: BrokerReport,
    pub slo_breaches: Vec<SloBreach>,
    pub metrics: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_log: Option<String>,
}

impl RunReport {
    pub fn org(&self, org_id: &str) -> Option<&OrgCounts> {
        self.orgs.iter().find(|o| o.org_id == org_id)
    }

    pub fn invariant_holds(&self) -> bool {
        self.orgs.iter().all(OrgCounts::invariant_holds)
    }

    pub fn total<F: Fn(&OrgCounts) -> u64>(&self, f: F) -> u64 {
        self.orgs.iter().map(f).sum()
    }

    pub fn ota_cost_total(&self) -> f64 {
        self.ota.iter().map(|g| g.ota_cost).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

fn counts(map: &BTreeMap<String, u64>) -> String {
    let parts: Vec<String> = map.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(",")
    }
}

/// Stable serialization. Text has one `org` line per organization.
pub fn report(run: &RunReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(run).expect("report serializes");
            v.push(b'\n');
            v
        }
        ReportFormat::Text => render_text(run).into_bytes(),
    }
}

fn render_text(r: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {} seed {} from {} to {} ({}s)",
        if r.scenario.is_empty() { "-" } else { &r.scenario },
        r.seed,
        r.start.to_rfc3339(),
        r.end.to_rfc3339(),
        format_value(r.duration_s)
    );
    for o in &r.orgs {
        let _ = writeln!(
            out,
            "org {} trace={} samples={} frames_sent={} frames_lost={} received={} ingested={} \
             transform_errors={} dedup_drops={} stored={} quarantined={} missing={} alarms={}",
            o.org_id,
            o.trace,
            o.samples,
            o.frames_sent,
            o.frames_lost,
            o.records_received,
            o.records_ingested,
            o.transform_errors,
            o.dedup_drops,
            o.observations_stored,
            o.quarantined,
            o.missing_synthesized,
            counts(&o.alarms)
        );
    }
    for n in &r.energy {
        let _ = writeln!(
            out,
            "energy {} org={} remaining_j={:.6} alive={} balanced={}",
            n.node_id, n.org_id, n.remaining_j, n.alive, n.balanced
        );
    }
    for g in &r.ota {
        let _ = writeln!(
            out,
            "ota {} org={} platform={} bytes={} cost={:.6}",
            g.gateway_id, g.org_id, g.platform_id, g.ota_bytes, g.ota_cost
        );
    }
    for c in &r.consumers {
        let _ = writeln!(
            out,
            "consumer {} pushed={} pulled={}",
            c.principal_id,
            counts(&c.pushed),
            counts(&c.pulled)
        );
    }
    for b in &r.slo_breaches {
        let op = match b.op {
            crate::monitoring::BoundOp::Le => "<=",
            crate::monitoring::BoundOp::Ge => ">=",
        };
        let _ = writeln!(
            out,
            "slo_breach {} observed={} bound={op}{}",
            b.rule,
            format_value(b.observed),
            format_value(b.threshold)
        );
    }
    let _ = writeln!(
        out,
        "invariant {}",
        if r.invariant_holds() { "ok" } else { "violated" }
    );
    if let Some(p) = &r.event_log {
        let _ = writeln!(out, "event_log {p}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        let mut o = OrgCounts::new("org7", "pusher");
        o.samples = 96;
        o.records_ingested = 96;
        o.observations_stored = 95;
        o.dedup_drops = 1;
        RunReport {
            scenario: "t".into(),
            seed: 3,
            orgs: vec![o, OrgCounts::new("org8", "fetcher")],
            metrics: "a_total 1\n".into(),
            ..RunReport::default()
        }
    }

    #[test]
    fn json_round_trips() {
        let r = sample();
        let back: RunReport = serde_json::from_slice(&report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn text_has_one_line_per_org() {
        let text = String::from_utf8(report(&sample(), ReportFormat::Text)).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("org ")).count(), 2);
        assert!(text.contains("invariant ok"));
    }

    #[test]
    fn invariant_counts() {
        let mut r = sample();
        assert!(r.invariant_holds());
        r.orgs[0].transform_errors = 1;
        assert!(!r.invariant_holds());
    }
}
