//! Classification into openness categories and routing onto the core
//! broker's topic tree.
//!
//! Topics:
//! - `data/<category>/<org>/<platform>/<parameter>` for normal delivery
//! - `quarantine/<org>/<parameter>` for observations whose overall flag is in
//!   the policy's quarantine set

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::broker::topic::TopicPath;
use crate::model::{AttributeFlag, DataCategory, Observation};
use crate::time::Timestamp;

pub const STAGE: &str = "triage";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleMatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub org_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub platform_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
}

impl RuleMatch {
    pub fn matches(&self, obs: &Observation) -> bool {
        let eq = |want: &Option<String>, have: &str| want.as_deref().map_or(true, |w| w == have);
        eq(&self.org_id, &obs.org_id) && eq(&self.platform_id, &obs.platform_id) && eq(&self.parameter, &obs.parameter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageRule {
    #[serde(rename = "match")]
    pub when: RuleMatch,
    pub category: DataCategory,
}

fn default_quarantine() -> BTreeSet<AttributeFlag> {
    BTreeSet::from([AttributeFlag::Bad])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriagePolicy {
    #[serde(default)]
    pub rules: Vec<TriageRule>,
    pub default: DataCategory,
    #[serde(default = "default_quarantine")]
    pub quarantine_flags: BTreeSet<AttributeFlag>,
}

impl TriagePolicy {
    pub fn new(default: DataCategory) -> Self {
        TriagePolicy {
            rules: Vec::new(),
            default,
            quarantine_flags: default_quarantine(),
        }
    }

    pub fn rule(mut self, when: RuleMatch, category: DataCategory) -> Self {
        self.rules.push(TriageRule { when, category });
        self
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl Default for TriagePolicy {
    fn default() -> Self {
        TriagePolicy::new(DataCategory::default())
    }
}

/// First matching rule wins; otherwise the default.
pub fn classify(obs: &Observation, policy: &TriagePolicy) -> DataCategory {
    policy
        .rules
        .iter()
        .find(|r| r.when.matches(obs))
        .map_or(policy.default, |r| r.category)
}

pub fn is_quarantined(obs: &Observation, policy: &TriagePolicy) -> bool {
    policy.quarantine_flags.contains(&obs.qc.overall)
}

pub fn route(obs: &Observation, policy: &TriagePolicy) -> TopicPath {
    let t = if is_quarantined(obs, policy) {
        TopicPath::from_levels(["quarantine", &obs.org_id, &obs.parameter])
    } else {
        TopicPath::from_levels([
            "data",
            obs.category.slug(),
            &obs.org_id,
            &obs.platform_id,
            &obs.parameter,
        ])
    };
    t.expect("validated observations have topic-safe ids")
}

/// Classifies, records the step and picks the topic.
pub fn triage(obs: Observation, policy: &TriagePolicy, now: Timestamp) -> (Observation, TopicPath) {
    let category = classify(&obs, policy);
    let obs = Observation { category, ..obs }
        .append_lineage(STAGE, now, category.slug())
        .expect("triage follows qc");
    let topic = route(&obs, policy);
    (obs, topic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::topic::TopicFilter;
    use crate::model::{fixtures, QcReport};
    use DataCategory::*;

    fn param(p: &str) -> RuleMatch {
        RuleMatch {
            parameter: Some(p.into()),
            ..RuleMatch::default()
        }
    }

    fn obs(parameter: &str) -> Observation {
        let mut o = fixtures::observation();
        o.parameter = parameter.into();
        o.qc = QcReport::new(AttributeFlag::Good, AttributeFlag::Good, AttributeFlag::Good, AttributeFlag::Good);
        o
    }

    #[test]
    fn bathymetry_is_legally_restricted() {
        let p = TriagePolicy::new(OpenAccess).rule(param("bathymetry"), LegallyRestricted);
        assert_eq!(classify(&obs("bathymetry"), &p), LegallyRestricted);
        assert_eq!(classify(&obs("temperature"), &p), OpenAccess);
    }

    #[test]
    fn first_rule_wins() {
        let p = TriagePolicy::new(OpenAccess)
            .rule(param("temperature"), BusinessCritical)
            .rule(
                RuleMatch {
                    org_id: Some("org7".into()),
                    ..RuleMatch::default()
                },
                LegallyRestricted,
            );
        assert_eq!(classify(&obs("temperature"), &p), BusinessCritical);
    }

    #[test]
    fn routes() {
        let p = TriagePolicy::new(OpenAccess);
        let (o, t) = triage(obs("temperature"), &p, fixtures::observation().ingested_at);
        assert_eq!(t.as_str(), "data/open_access/org7/p1/temperature");
        assert_eq!(o.lineage.last().unwrap().stage, STAGE);

        let mut bad = obs("temperature");
        bad.qc = QcReport::new(AttributeFlag::Bad, AttributeFlag::Good, AttributeFlag::Good, AttributeFlag::Good);
        assert_eq!(route(&bad, &p).as_str(), "quarantine/org7/temperature");

        let mut missing = obs("temperature");
        missing.value = None;
        missing.qc = QcReport::new(
            AttributeFlag::NotEvaluated,
            AttributeFlag::Missing,
            AttributeFlag::NotEvaluated,
            AttributeFlag::NotEvaluated,
        );
        missing.category = OpenAccess;
        assert_eq!(route(&missing, &p).as_str(), "data/open_access/org7/p1/temperature");
    }

    #[test]
    fn restricted_never_on_open_topics() {
        let p = TriagePolicy::new(OpenAccess).rule(param("bathymetry"), LegallyRestricted);
        let open = TopicFilter::new("data/open_access/#").unwrap();
        let bc = TopicFilter::new("data/business_critical/#").unwrap();
        for flag in AttributeFlag::ALL {
            let mut o = obs("bathymetry");
            o.qc.overall = flag;
            let (o, t) = triage(o, &p, fixtures::observation().ingested_at);
            assert_eq!(o.category, LegallyRestricted);
            assert!(!open.matches(&t) && !bc.matches(&t));
        }
    }

    #[test]
    fn policy_json() {
        let text = r#"{"rules":[{"match":{"parameter":"bathymetry"},"category":"legally_restricted"}],"default":"open_access"}"#;
        let p: TriagePolicy = serde_json::from_str(text).unwrap();
        assert_eq!(p.quarantine_flags, BTreeSet::from([AttributeFlag::Bad]));
        assert_eq!(p, TriagePolicy::new(OpenAccess).rule(param("bathymetry"), LegallyRestricted));
    }
}
