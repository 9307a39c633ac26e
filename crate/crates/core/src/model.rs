//! Canonical observation model shared by every platform stage.
//!
//! Every org-specific record is mapped into an [`Observation`] before it is
//! quality-controlled, classified, stored, or handed to consumers. The JSON
//! form of an observation (one object, field names as declared here, plus
//! `"schema_version": "1"`) is the interchange format on the core broker and
//! in the data-space journal.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::time::Timestamp;

pub const SCHEMA_VERSION: &str = "1";

/// Per-attribute quality verdict.
///
/// The first five variants are totally ordered from best to worst;
/// `NotEvaluated` sits outside the order and never wins a worst-of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeFlag {
    Good,
    ProbablyGood,
    ProbablyBad,
    Bad,
    Missing,
    NotEvaluated,
}

impl AttributeFlag {
    pub const ALL: [AttributeFlag; 6] = [
        AttributeFlag::Good,
        AttributeFlag::ProbablyGood,
        AttributeFlag::ProbablyBad,
        AttributeFlag::Bad,
        AttributeFlag::Missing,
        AttributeFlag::NotEvaluated,
    ];

    fn severity(self) -> Option<u8> {
        match self {
            AttributeFlag::Good => Some(0),
            AttributeFlag::ProbablyGood => Some(1),
            AttributeFlag::ProbablyBad => Some(2),
            AttributeFlag::Bad => Some(3),
            AttributeFlag::Missing => Some(4),
            AttributeFlag::NotEvaluated => None,
        }
    }

    /// Compares two evaluated flags by severity. `None` when either side is
    /// `NotEvaluated`.
    pub fn severity_cmp(self, other: AttributeFlag) -> Option<Ordering> {
        Some(self.severity()?.cmp(&other.severity()?))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeFlag::Good => "good",
            AttributeFlag::ProbablyGood => "probably_good",
            AttributeFlag::ProbablyBad => "probably_bad",
            AttributeFlag::Bad => "bad",
            AttributeFlag::Missing => "missing",
            AttributeFlag::NotEvaluated => "not_evaluated",
        }
    }
}

impl fmt::Display for AttributeFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Worst flag of a collection under Good < ProbablyGood < ProbablyBad < Bad < Missing.
/// `NotEvaluated` entries are ignored; an empty or all-`NotEvaluated` input yields
/// `NotEvaluated`.
pub fn worst_flag<I>(flags: I) -> AttributeFlag
where
    I: IntoIterator<Item = AttributeFlag>,
{
    flags
        .into_iter()
        .filter(|f| *f != AttributeFlag::NotEvaluated)
        .max_by_key(|f| f.severity())
        .unwrap_or(AttributeFlag::NotEvaluated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcReport {
    pub accuracy: AttributeFlag,
    pub completeness: AttributeFlag,
    pub consistency: AttributeFlag,
    pub currentness: AttributeFlag,
    pub overall: AttributeFlag,
}

impl QcReport {
    pub fn not_evaluated() -> Self {
        QcReport::new(
            AttributeFlag::NotEvaluated,
            AttributeFlag::NotEvaluated,
            AttributeFlag::NotEvaluated,
            AttributeFlag::NotEvaluated,
        )
    }

    /// Builds a report with `overall` derived from the four attributes.
    pub fn new(
        accuracy: AttributeFlag,
        completeness: AttributeFlag,
        consistency: AttributeFlag,
        currentness: AttributeFlag,
    ) -> Self {
        QcReport {
            accuracy,
            completeness,
            consistency,
            currentness,
            overall: worst_flag([accuracy, completeness, consistency, currentness]),
        }
    }

    pub fn attributes(&self) -> [(&'static str, AttributeFlag); 4] {
        [
            ("accuracy", self.accuracy),
            ("completeness", self.completeness),
            ("consistency", self.consistency),
            ("currentness", self.currentness),
        ]
    }
}

/// Openness tier assigned by triage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataCategory {
    OpenAccess,
    BusinessCritical,
    LegallyRestricted,
}

impl DataCategory {
    pub const ALL: [DataCategory; 3] = [
        DataCategory::OpenAccess,
        DataCategory::BusinessCritical,
        DataCategory::LegallyRestricted,
    ];

    /// Topic level used for this category on the core broker.
    pub fn slug(self) -> &'static str {
        match self {
            DataCategory::OpenAccess => "open_access",
            DataCategory::BusinessCritical => "business_critical",
            DataCategory::LegallyRestricted => "legally_restricted",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        DataCategory::ALL.into_iter().find(|c| c.slug() == s)
    }
}

impl Default for DataCategory {
    fn default() -> Self {
        DataCategory::BusinessCritical
    }
}

impl fmt::Display for DataCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
    pub depth_m: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageStep {
    pub stage: String,
    pub at: Timestamp,
    pub detail: String,
}

/// Marker field carrying the interchange schema version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchemaVersion;

impl Serialize for SchemaVersion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(SCHEMA_VERSION)
    }
}

impl<'de> Deserialize<'de> for SchemaVersion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = String::deserialize(d)?;
        if v == SCHEMA_VERSION {
            Ok(SchemaVersion)
        } else {
            Err(serde::de::Error::custom(format!(
                "unsupported schema_version {v:?}, expected {SCHEMA_VERSION:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub schema_version: SchemaVersion,
    pub observation_id: String,
    pub org_id: String,
    pub platform_id: String,
    pub sensor_id: String,
    pub parameter: String,
    pub unit: String,
    /// `None` only for records synthesized by the completeness check.
    pub value: Option<f64>,
    pub measured_at: Timestamp,
    pub ingested_at: Timestamp,
    pub location: Location,
    pub qc: QcReport,
    pub category: DataCategory,
    pub lineage: Vec<LineageStep>,
}

/// Deterministic identifier: one observation per (org, sensor, instant).
pub fn observation_id(org_id: &str, sensor_id: &str, measured_at: Timestamp) -> String {
    format!("{org_id}:{sensor_id}:{}", measured_at.millis())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("lineage time regression: step at {at} precedes last step at {last}")]
pub struct TimeRegression {
    pub last: Timestamp,
    pub at: Timestamp,
}

impl Observation {
    pub fn is_missing(&self) -> bool {
        self.value.is_none()
    }

    /// Appends one lineage step. Equal timestamps are allowed.
    pub fn append_lineage(
        mut self,
        stage: impl Into<String>,
        at: Timestamp,
        detail: impl Into<String>,
    ) -> Result<Observation, TimeRegression> {
        if let Some(last) = self.lineage.last() {
            if at < last.at {
                return Err(TimeRegression { last: last.at, at });
            }
        }
        self.lineage.push(LineageStep {
            stage: stage.into(),
            at,
            detail: detail.into(),
        });
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("observation serializes")
    }

    pub fn from_json(s: &[u8]) -> serde_json::Result<Observation> {
        serde_json::from_slice(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationRule {
    Empty,
    /// Contains a character that cannot appear in a topic level.
    NotTopicSafe,
    OutOfRange,
    NotFinite,
    TimeOrdering,
    MissingValueFlag,
    OverallMismatch,
    LineageRegression,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {rule:?}")]
pub struct ValidationError {
    pub field: &'static str,
    pub rule: ValidationRule,
}

fn topic_safe(s: &str) -> bool {
    !s.chars().any(|c| matches!(c, '/' | '+' | '#' | '\0'))
}

/// Checks every invariant of the canonical model. An empty result means the
/// observation is valid.
pub fn validate_observation(obs: &Observation) -> Vec<ValidationError> {
    let mut errs = Vec::new();
    let mut push = |field, rule| errs.push(ValidationError { field, rule });

    if obs.observation_id.is_empty() {
        push("observation_id", ValidationRule::Empty);
    }
    if obs.unit.is_empty() {
        push("unit", ValidationRule::Empty);
    }
    for (field, v) in [
        ("org_id", &obs.org_id),
        ("platform_id", &obs.platform_id),
        ("sensor_id", &obs.sensor_id),
        ("parameter", &obs.parameter),
    ] {
        if v.is_empty() {
            push(field, ValidationRule::Empty);
        } else if !topic_safe(v) {
            push(field, ValidationRule::NotTopicSafe);
        }
    }

    if let Some(v) = obs.value {
        if !v.is_finite() {
            push("value", ValidationRule::NotFinite);
        }
    }

    let loc = &obs.location;
    if !loc.lat.is_finite() {
        push("location.lat", ValidationRule::NotFinite);
    } else if !(-90.0..=90.0).contains(&loc.lat) {
        push("location.lat", ValidationRule::OutOfRange);
    }
    if !loc.lon.is_finite() {
        push("location.lon", ValidationRule::NotFinite);
    } else if !(-180.0..=180.0).contains(&loc.lon) {
        push("location.lon", ValidationRule::OutOfRange);
    }
    if !loc.depth_m.is_finite() {
        push("location.depth_m", ValidationRule::NotFinite);
    } else if loc.depth_m < 0.0 {
        push("location.depth_m", ValidationRule::OutOfRange);
    }

    if obs.measured_at > obs.ingested_at {
        push("measured_at", ValidationRule::TimeOrdering);
    }

    let missing_flag = obs.qc.completeness == AttributeFlag::Missing;
    if obs.value.is_none() != missing_flag {
        push("qc.completeness", ValidationRule::MissingValueFlag);
    }
    let q = &obs.qc;
    if q.overall != worst_flag([q.accuracy, q.completeness, q.consistency, q.currentness]) {
        push("qc.overall", ValidationRule::OverallMismatch);
    }

    for pair in obs.lineage.windows(2) {
        if pair[1].at < pair[0].at {
            push("lineage", ValidationRule::LineageRegression);
            break;
        }
    }
    if obs.lineage.iter().any(|s| s.stage.is_empty()) {
        push("lineage", ValidationRule::Empty);
    }

    errs
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn observation() -> Observation {
        let t = Timestamp(1_704_067_200_000);
        Observation {
            schema_version: SchemaVersion,
            observation_id: observation_id("org7", "s1", t),
            org_id: "org7".into(),
            platform_id: "p1".into(),
            sensor_id: "s1".into(),
            parameter: "temperature".into(),
            unit: "Cel".into(),
            value: Some(9.8),
            measured_at: t,
            ingested_at: Timestamp(t.0 + 2_000),
            location: Location {
                lat: 41.1,
                lon: -8.7,
                depth_m: 5.0,
            },
            qc: QcReport::not_evaluated(),
            category: DataCategory::BusinessCritical,
            lineage: Vec::new(),
        }
    }
}
