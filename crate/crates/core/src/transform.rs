//! Data transformation: organization records to canonical observations via
//! registered, versioned field mappings, plus replay deduplication.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::wire::{RawRecord, Scalar, WireFormat};
use crate::model::{observation_id, validate_observation, DataCategory, Location, Observation, QcReport, SchemaVersion, ValidationError};
use crate::time::{Millis, Timestamp};

pub const STAGE: &str = "transform";
/// Dedup memory, in measurement time.
pub const DEDUP_HORIZON: Millis = Millis(48 * 3_600_000);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetField {
    SensorId,
    PlatformId,
    Parameter,
    Unit,
    MeasuredAt,
    Value,
    Lat,
    Lon,
    DepthM,
}

impl TargetField {
    pub const REQUIRED: [TargetField; 9] = [
        TargetField::SensorId,
        TargetField::PlatformId,
        TargetField::Parameter,
        TargetField::Unit,
        TargetField::MeasuredAt,
        TargetField::Value,
        TargetField::Lat,
        TargetField::Lon,
        TargetField::DepthM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TargetField::SensorId => "sensor_id",
            TargetField::PlatformId => "platform_id",
            TargetField::Parameter => "parameter",
            TargetField::Unit => "unit",
            TargetField::MeasuredAt => "measured_at",
            TargetField::Value => "value",
            TargetField::Lat => "location.lat",
            TargetField::Lon => "location.lon",
            TargetField::DepthM => "location.depth_m",
        }
    }

    fn kind(self) -> FieldKind {
        match self {
            TargetField::SensorId | TargetField::PlatformId | TargetField::Parameter | TargetField::Unit => {
                FieldKind::Text
            }
            TargetField::MeasuredAt => FieldKind::Time,
            _ => FieldKind::Number,
        }
    }
}

impl fmt::Display for TargetField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FieldKind {
    Text,
    Number,
    Time,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Converter {
    Identity,
    ParseIso8601ToEpochMs,
    ParseDecimal,
    UnitScale { factor: f64, offset: f64 },
    Constant { value: Scalar },
}

impl Converter {
    fn fits(&self, kind: FieldKind) -> bool {
        match self {
            Converter::Identity => kind != FieldKind::Time,
            Converter::ParseIso8601ToEpochMs => kind == FieldKind::Time,
            Converter::ParseDecimal | Converter::UnitScale { .. } => kind == FieldKind::Number,
            Converter::Constant { value } => match kind {
                FieldKind::Text => matches!(value, Scalar::Text(_)),
                FieldKind::Number => matches!(value, Scalar::Number(n) if n.is_finite()),
                FieldKind::Time => matches!(value, Scalar::Text(t) if Timestamp::parse_rfc3339(t).is_some()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRule {
    /// Absent only for `Constant`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_field: Option<String>,
    pub target_field: TargetField,
    pub converter: Converter,
}

impl MappingRule {
    pub fn new(source: &str, target: TargetField, converter: Converter) -> Self {
        MappingRule {
            source_field: Some(source.to_owned()),
            target_field: target,
            converter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMapping {
    pub org_id: String,
    pub source_format: WireFormat,
    pub rules: Vec<MappingRule>,
}

impl FieldMapping {
    /// Straight mapping of a format's own vocabulary.
    pub fn for_vocabulary(org_id: &str, format: WireFormat) -> Self {
        let v = format.vocabulary();
        let num = |s: &str, t| MappingRule::new(s, t, Converter::ParseDecimal);
        FieldMapping {
            org_id: org_id.to_owned(),
            source_format: format,
            rules: vec![
                MappingRule::new(v.sensor_id, TargetField::SensorId, Converter::Identity),
                MappingRule::new(v.platform_id, TargetField::PlatformId, Converter::Identity),
                MappingRule::new(v.parameter, TargetField::Parameter, Converter::Identity),
                MappingRule::new(v.unit, TargetField::Unit, Converter::Identity),
                MappingRule::new(v.measured_at, TargetField::MeasuredAt, Converter::ParseIso8601ToEpochMs),
                num(v.value, TargetField::Value),
                num(v.lat, TargetField::Lat),
                num(v.lon, TargetField::Lon),
                num(v.depth_m, TargetField::DepthM),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MappingId {
    pub org_id: String,
    pub format: WireFormat,
    pub version: u32,
}

impl fmt::Display for MappingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/v{}", self.org_id, self.format, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("incomplete mapping, uncovered: {}", .0.iter().map(|f| f.name()).collect::<Vec<_>>().join(", "))]
    IncompleteMapping(Vec<TargetField>),
    #[error("{0} covered more than once")]
    DuplicateTarget(TargetField),
    #[error("converter does not fit {0}")]
    ConverterMismatch(TargetField),
    #[error("{0} needs a source field")]
    MissingSource(TargetField),
}

#[derive(Debug, Clone, Default)]
pub struct MappingRegistry {
    versions: BTreeMap<(String, WireFormat), Vec<FieldMapping>>,
}

/// Checks coverage (each required field exactly once) and converter fit.
pub fn check_mapping(m: &FieldMapping) -> Result<(), MappingError> {
    let mut covered = BTreeSet::new();
    for r in &m.rules {
        if !covered.insert(r.target_field) {
            return Err(MappingError::DuplicateTarget(r.target_field));
        }
        if !r.converter.fits(r.target_field.kind()) {
            return Err(MappingError::ConverterMismatch(r.target_field));
        }
        if r.source_field.is_none() && !matches!(r.converter, Converter::Constant { .. }) {
            return Err(MappingError::MissingSource(r.target_field));
        }
    }
    let missing: Vec<TargetField> = TargetField::REQUIRED
        .into_iter()
        .filter(|f| !covered.contains(f))
        .collect();
    if !missing.is_empty() {
        return Err(MappingError::IncompleteMapping(missing));
    }
    Ok(())
}

impl MappingRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new version for (org, format); older versions stay resolvable.
    pub fn register_mapping(&mut self, mapping: FieldMapping) -> Result<MappingId, MappingError> {
        check_mapping(&mapping)?;
        let key = (mapping.org_id.clone(), mapping.source_format);
        let list = self.versions.entry(key.clone()).or_default();
        list.push(mapping);
        Ok(MappingId {
            org_id: key.0,
            format: key.1,
            version: list.len() as u32,
        })
    }

    pub fn resolve(&self, id: &MappingId) -> Option<&FieldMapping> {
        self.versions
            .get(&(id.org_id.clone(), id.format))?
            .get((id.version as usize).checked_sub(1)?)
    }

    pub fn current(&self, org_id: &str, format: WireFormat) -> Option<(MappingId, &FieldMapping)> {
        let list = self.versions.get(&(org_id.to_owned(), format))?;
        let m = list.last()?;
        Some((
            MappingId {
                org_id: org_id.to_owned(),
                format,
                version: list.len() as u32,
            },
            m,
        ))
    }

    /// Loads a JSON array of mappings, registering them in order.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let list: Vec<FieldMapping> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut reg = MappingRegistry::new();
        for (i, m) in list.into_iter().enumerate() {
            reg.register_mapping(m).map_err(|e| format!("{}[{i}]: {e}", path.display()))?;
        }
        Ok(reg)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("no mapping for {org_id}/{format}")]
    MappingNotFound { org_id: String, format: WireFormat },
    #[error("cannot convert {field}: {reason}")]
    Conversion { field: TargetField, reason: String },
    #[error("invalid observation: {0:?}")]
    Invalid(Vec<ValidationError>),
}

/// Strict decimal syntax: optional sign, digits, optional fraction and
/// exponent. Rejects `inf`, `NaN` and friends.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let s = s.trim();
    let body = s.strip_prefix(['-', '+']).unwrap_or(s);
    let (mantissa, exp) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits = |x: &str| x.bytes().all(|b| b.is_ascii_digit());
    if int.is_empty() || !digits(int) || !digits(frac) || (mantissa.contains('.') && frac.is_empty()) {
        return None;
    }
    if let Some(e) = exp {
        let e = e.strip_prefix(['-', '+']).unwrap_or(e);
        if e.is_empty() || !digits(e) {
            return None;
        }
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Rounds to nine decimals so scaled values compare equal across formats.
pub fn normalize(x: f64) -> f64 {
    let r = (x * 1e9).round() / 1e9;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

enum Converted {
    Text(String),
    Number(f64),
    Time(Timestamp),
}

fn convert(rule: &MappingRule, rec: &RawRecord) -> Result<Converted, TransformError> {
    let field = rule.target_field;
    let err = |reason: String| TransformError::Conversion { field, reason };
    let source = || -> Result<&Scalar, TransformError> {
        let name = rule.source_field.as_deref().unwrap_or_default();
        rec.get(name).ok_or_else(|| err(format!("missing source field {name:?}")))
    };
    let decimal = |s: &Scalar| -> Result<f64, TransformError> {
        match s {
            Scalar::Number(n) if n.is_finite() => Ok(*n),
            Scalar::Text(t) => parse_decimal(t).ok_or_else(|| err(format!("not a decimal: {t:?}"))),
            other => Err(err(format!("not a decimal: {other}"))),
        }
    };
    Ok(match &rule.converter {
        Converter::Constant { value } => match (field.kind(), value) {
            (FieldKind::Text, Scalar::Text(t)) => Converted::Text(t.clone()),
            (FieldKind::Number, Scalar::Number(n)) => Converted::Number(*n),
            (FieldKind::Time, Scalar::Text(t)) => {
                Converted::Time(Timestamp::parse_rfc3339(t).ok_or_else(|| err(format!("bad time {t:?}")))?)
            }
            _ => return Err(err("constant of wrong type".into())),
        },
        Converter::Identity => match (field.kind(), source()?) {
            (FieldKind::Text, Scalar::Text(t)) => Converted::Text(t.clone()),
            (FieldKind::Number, Scalar::Number(n)) if n.is_finite() => Converted::Number(*n),
            (_, other) => return Err(err(format!("unexpected {other:?}"))),
        },
        Converter::ParseIso8601ToEpochMs => {
            let s = source()?;
            let t = s.as_text().ok_or_else(|| err(format!("not a timestamp: {s}")))?;
            Converted::Time(Timestamp::parse_rfc3339(t).ok_or_else(|| err(format!("not a timestamp: {t:?}")))?)
        }
        Converter::ParseDecimal => Converted::Number(decimal(source()?)?),
        Converter::UnitScale { factor, offset } => {
            Converted::Number(normalize(decimal(source()?)? * factor + offset))
        }
    })
}

/// Maps `record` through the current mapping for its (org, format).
pub fn to_canonical(record: &RawRecord, registry: &MappingRegistry) -> Result<Observation, TransformError> {
    let (id, mapping) = registry
        .current(&record.org_id, record.source_format)
        .ok_or_else(|| TransformError::MappingNotFound {
            org_id: record.org_id.clone(),
            format: record.source_format,
        })?;
    let mut text: BTreeMap<TargetField, String> = BTreeMap::new();
    let mut num: BTreeMap<TargetField, f64> = BTreeMap::new();
    let mut measured_at = None;
    for rule in &mapping.rules {
        match convert(rule, record)? {
            Converted::Text(t) => {
                text.insert(rule.target_field, t);
            }
            Converted::Number(n) => {
                num.insert(rule.target_field, n);
            }
            Converted::Time(t) => measured_at = Some(t),
        }
    }
    let measured_at = measured_at.expect("checked mapping covers measured_at");
    let mut take = |f| text.remove(&f).unwrap_or_default();
    let (sensor_id, platform_id, parameter, unit) = (
        take(TargetField::SensorId),
        take(TargetField::PlatformId),
        take(TargetField::Parameter),
        take(TargetField::Unit),
    );
    let obs = Observation {
        schema_version: SchemaVersion,
        observation_id: observation_id(&record.org_id, &sensor_id, measured_at),
        org_id: record.org_id.clone(),
        platform_id,
        sensor_id,
        parameter,
        unit,
        value: Some(num[&TargetField::Value]),
        measured_at,
        ingested_at: record.received_at,
        location: Location {
            lat: num[&TargetField::Lat],
            lon: num[&TargetField::Lon],
            depth_m: num[&TargetField::DepthM],
        },
        qc: QcReport::not_evaluated(),
        category: DataCategory::default(),
        lineage: Vec::new(),
    }
    .append_lineage(STAGE, record.received_at, format!("{} via {id}", record.source_format))
    .expect("first lineage step");
    let errs = validate_observation(&obs);
    if !errs.is_empty() {
        return Err(TransformError::Invalid(errs));
    }
    Ok(obs)
}

/// `(sensor_id, measured_at)`
pub fn dedup_key(obs: &Observation) -> (String, Timestamp) {
    (obs.sensor_id.clone(), obs.measured_at)
}

/// Remembers keys within a horizon of the newest measurement time seen.
#[derive(Debug, Clone)]
pub struct Deduper {
    horizon: Millis,
    seen: BTreeSet<(Timestamp, String)>,
    newest: Option<Timestamp>,
}

impl Default for Deduper {
    fn default() -> Self {
        Deduper::new(DEDUP_HORIZON)
    }
}

impl Deduper {
    pub fn new(horizon: Millis) -> Self {
        Deduper {
            horizon,
            seen: BTreeSet::new(),
            newest: None,
        }
    }

    /// True the first time a key is offered within the horizon.
    pub fn admit(&mut self, obs: &Observation) -> bool {
        let (sensor, t) = dedup_key(obs);
        if !self.seen.insert((t, sensor)) {
            return false;
        }
        if self.newest.map_or(true, |n| t > n) {
            self.newest = Some(t);
            let floor = t - self.horizon;
            while let Some(first) = self.seen.first() {
                if first.0 >= floor {
                    break;
                }
                self.seen.pop_first();
            }
        }
        true
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}
