//! Append-only observation store with category-aware pull queries.
//!
//! Rows live in an in-memory index keyed by (sensor, measurement time). An
//! optional JSON-lines journal of canonical observations is replayed on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{Access, Action, Resource, Role};
use crate::model::{AttributeFlag, DataCategory, Location, Observation};
use crate::time::Timestamp;

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Great-circle distance; depth is ignored.
pub fn haversine_m(a: &Location, b: &Location) -> f64 {
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default)]
    pub org_id: Option<String>,
    #[serde(default)]
    pub platform_id: Option<String>,
    #[serde(default)]
    pub parameter: Option<String>,
    #[serde(default)]
    pub categories: Option<BTreeSet<DataCategory>>,
    pub from: Timestamp,
    pub to: Timestamp,
    #[serde(default)]
    pub include_quarantined: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("selector range is empty")]
    EmptyRange,
    #[error("not authorized for {0}")]
    NotAuthorized(DataCategory),
}

impl Selector {
    pub fn between(from: Timestamp, to: Timestamp) -> Result<Self, QueryError> {
        if from >= to {
            return Err(QueryError::EmptyRange);
        }
        Ok(Selector {
            org_id: None,
            platform_id: None,
            parameter: None,
            categories: None,
            from,
            to,
            include_quarantined: false,
        })
    }

    /// The whole representable time line.
    pub fn all() -> Self {
        Selector::between(Timestamp(i64::MIN), Timestamp(i64::MAX)).expect("non-empty")
    }

    fn matches(&self, o: &Observation) -> bool {
        let eq = |want: &Option<String>, have: &str| want.as_deref().map_or(true, |w| w == have);
        eq(&self.org_id, &o.org_id)
            && eq(&self.platform_id, &o.platform_id)
            && eq(&self.parameter, &o.parameter)
            && self.categories.as_ref().map_or(true, |c| c.contains(&o.category))
            && self.from <= o.measured_at
            && o.measured_at < self.to
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppendOutcome {
    Stored,
    /// Same key, longer lineage: the reprocessed row wins.
    Replaced,
    Ignored,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub stored: u64,
    pub replaced: u64,
    pub ignored: u64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("journal {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("journal {path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug)]
pub struct DataSpace {
    rows: BTreeMap<(String, Timestamp), Observation>,
    /// parameter -> sensor -> measurement time of the latest non-missing row
    latest: BTreeMap<String, BTreeMap<String, Timestamp>>,
    quarantine_flags: BTreeSet<AttributeFlag>,
    journal: Option<(PathBuf, BufWriter<File>)>,
    stats: StoreStats,
}

impl Default for DataSpace {
    fn default() -> Self {
        DataSpace::in_memory(BTreeSet::from([AttributeFlag::Bad]))
    }
}

impl DataSpace {
    pub fn in_memory(quarantine_flags: BTreeSet<AttributeFlag>) -> Self {
        DataSpace {
            rows: BTreeMap::new(),
            latest: BTreeMap::new(),
            quarantine_flags,
            journal: None,
            stats: StoreStats::default(),
        }
    }

    /// Opens (creating if needed) a journal and replays it.
    pub fn open(path: &Path, quarantine_flags: BTreeSet<AttributeFlag>) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.to_owned(),
            source,
        };
        let mut ds = DataSpace::in_memory(quarantine_flags);
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let obs = Observation::from_json(line.as_bytes()).map_err(|e| StoreError::Corrupt {
                    path: path.to_owned(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                ds.apply(obs);
            }
        }
        ds.stats = StoreStats::default();
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        ds.journal = Some((path.to_owned(), BufWriter::new(file)));
        Ok(ds)
    }

    fn apply(&mut self, obs: Observation) -> AppendOutcome {
        let key = (obs.sensor_id.clone(), obs.measured_at);
        let outcome = match self.rows.get(&key) {
            None => AppendOutcome::Stored,
            Some(old) if obs.lineage.len() > old.lineage.len() => AppendOutcome::Replaced,
            Some(_) => return AppendOutcome::Ignored,
        };
        if obs.value.is_some() {
            let per = self.latest.entry(obs.parameter.clone()).or_default();
            let t = per.entry(obs.sensor_id.clone()).or_insert(obs.measured_at);
            *t = (*t).max(obs.measured_at);
        }
        self.rows.insert(key, obs);
        outcome
    }

    /// Idempotent on (sensor, measurement time); a longer lineage replaces.
    pub fn append(&mut self, obs: Observation) -> Result<AppendOutcome, StoreError> {
        let line = obs.to_json();
        let outcome = self.apply(obs);
        match outcome {
            AppendOutcome::Stored => self.stats.stored += 1,
            AppendOutcome::Replaced => self.stats.replaced += 1,
            AppendOutcome::Ignored => {
                self.stats.ignored += 1;
                return Ok(outcome);
            }
        }
        if let Some((path, w)) = &mut self.journal {
            let io = |source| StoreError::Io {
                path: path.clone(),
                source,
            };
            w.write_all(line.as_bytes()).map_err(io)?;
            w.write_all(b"\n").map_err(io)?;
            w.flush().map_err(io)?;
        }
        Ok(outcome)
    }

    pub fn stats(&self) -> StoreStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.rows.values()
    }

    pub fn count_present(&self) -> usize {
        self.rows.values().filter(|o| o.value.is_some()).count()
    }

    pub fn count_missing(&self) -> usize {
        self.rows.values().filter(|o| o.value.is_none()).count()
    }

    pub fn is_quarantined(&self, obs: &Observation) -> bool {
        self.quarantine_flags.contains(&obs.qc.overall)
    }

    /// Rows the caller may see, ordered by measurement time. Naming an
    /// unauthorized category is an error; otherwise filtering is silent.
    pub fn query(&self, sel: &Selector, access: &Access) -> Result<Vec<Observation>, QueryError> {
        if sel.from >= sel.to {
            return Err(QueryError::EmptyRange);
        }
        let allowed: BTreeSet<DataCategory> = DataCategory::ALL
            .into_iter()
            .filter(|c| access.authorize(Action::QueryPull, Resource::Category(*c)).is_allow())
            .collect();
        if let Some(named) = &sel.categories {
            if let Some(c) = named.iter().find(|c| !allowed.contains(c)) {
                return Err(QueryError::NotAuthorized(*c));
            }
        }
        let see_quarantine = sel.include_quarantined && access.principal.has_role(Role::Operator);
        let mut out: Vec<Observation> = self
            .rows
            .values()
            .filter(|o| allowed.contains(&o.category))
            .filter(|o| see_quarantine || !self.is_quarantined(o))
            .filter(|o| sel.matches(o))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.measured_at, &a.sensor_id).cmp(&(b.measured_at, &b.sensor_id)));
        Ok(out)
    }

    /// Most recent non-missing row per sensor of `parameter` within
    /// `radius_m` of `near`.
    pub fn latest(&self, parameter: &str, near: &Location, radius_m: f64) -> Vec<Observation> {
        assert!(radius_m > 0.0, "radius must be positive");
        let Some(per) = self.latest.get(parameter) else {
            return Vec::new();
        };
        per.iter()
            .filter_map(|(sensor, t)| self.rows.get(&(sensor.clone(), *t)))
            .filter(|o| o.value.is_some() && haversine_m(&o.location, near) <= radius_m)
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{Grant, Principal};
    use crate::model::{fixtures, LineageStep, QcReport};
    use crate::time::Millis;
    use DataCategory::*;

    fn obs(sensor: &str, h: i64, cat: DataCategory) -> Observation {
        let mut o = fixtures::observation();
        o.sensor_id = sensor.into();
        o.measured_at = o.measured_at + Millis(h * 3_600_000);
        o.ingested_at = o.measured_at;
        o.category = cat;
        o.qc = QcReport::new(AttributeFlag::Good, AttributeFlag::Good, AttributeFlag::Good, AttributeFlag::Good);
        o.lineage = vec![LineageStep {
            stage: "transform".into(),
            at: o.ingested_at,
            detail: String::new(),
        }];
        o
    }

    fn consumer(cats: &[DataCategory]) -> Access {
        Access::new(
            Principal::new("c", "org9", &[Role::Consumer]),
            vec![Grant::categories(Action::QueryPull, cats)],
        )
    }

    #[test]
    fn append_idempotence() {
        let mut ds = DataSpace::default();
        assert_eq!(ds.append(obs("s1", 0, OpenAccess)).unwrap(), AppendOutcome::Stored);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.append(obs("s1", 0, OpenAccess)).unwrap(), AppendOutcome::Ignored);
        let mut longer = obs("s1", 0, OpenAccess);
        longer.value = Some(1.0);
        longer.lineage.push(LineageStep {
            stage: "qc".into(),
            at: longer.ingested_at,
            detail: String::new(),
        });
        assert_eq!(ds.append(longer).unwrap(), AppendOutcome::Replaced);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.iter().next().unwrap().value, Some(1.0));
    }

    #[test]
    fn query_filters_silently() {
        let mut ds = DataSpace::default();
        ds.append(obs("s1", 0, OpenAccess)).unwrap();
        ds.append(obs("s2", 0, LegallyRestricted)).unwrap();
        ds.append(obs("s3", 0, BusinessCritical)).unwrap();
        let rows = ds.query(&Selector::all(), &consumer(&[OpenAccess])).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].category, OpenAccess);
    }

    #[test]
    fn naming_unauthorized_category_fails() {
        let ds = DataSpace::default();
        let mut sel = Selector::all();
        sel.categories = Some(BTreeSet::from([LegallyRestricted]));
        assert_eq!(
            ds.query(&sel, &consumer(&[OpenAccess])),
            Err(QueryError::NotAuthorized(LegallyRestricted))
        );
        assert_eq!(ds.query(&Selector::all(), &consumer(&[OpenAccess])).unwrap(), vec![]);
    }

    #[test]
    fn ordering_and_range() {
        let mut ds = DataSpace::default();
        for h in [3, 1, 2, 0] {
            ds.append(obs("s1", h, OpenAccess)).unwrap();
        }
        let base = fixtures::observation().measured_at;
        let sel = Selector::between(base + Millis(3_600_000), base + Millis(3 * 3_600_000)).unwrap();
        let rows = ds.query(&sel, &consumer(&[OpenAccess])).unwrap();
        let hours: Vec<i64> = rows.iter().map(|o| (o.measured_at - base).0 / 3_600_000).collect();
        assert_eq!(hours, vec![1, 2]);
        assert_eq!(Selector::between(base, base), Err(QueryError::EmptyRange));
    }

    #[test]
    fn quarantine_needs_operator() {
        let mut ds = DataSpace::default();
        let mut bad = obs("s1", 0, OpenAccess);
        bad.qc = QcReport::new(AttributeFlag::Bad, AttributeFlag::Good, AttributeFlag::Good, AttributeFlag::Good);
        ds.append(bad).unwrap();
        let mut sel = Selector::all();
        sel.include_quarantined = true;
        assert!(ds.query(&sel, &consumer(&[OpenAccess])).unwrap().is_empty());
        let op = Access::new(
            Principal::new("op", "platform", &[Role::Operator]),
            vec![Grant::categories(Action::QueryPull, &DataCategory::ALL)],
        );
        assert_eq!(ds.query(&sel, &op).unwrap().len(), 1);
        sel.include_quarantined = false;
        assert!(ds.query(&sel, &op).unwrap().is_empty());
    }

    #[test]
    fn latest_by_radius() {
        let mut ds = DataSpace::default();
        let mut a = obs("a", 0, OpenAccess);
        a.location = Location { lat: 41.0, lon: -8.7, depth_m: 5.0 };
        let mut a2 = obs("a", 1, OpenAccess);
        a2.location = a.location;
        a2.value = Some(11.0);
        let mut b = obs("b", 0, OpenAccess);
        // about 556 m north
        b.location = Location { lat: 41.005, lon: -8.7, depth_m: 50.0 };
        let mut far = obs("far", 0, OpenAccess);
        far.location = Location { lat: 41.1, lon: -8.7, depth_m: 5.0 };
        let mut gone = obs("gone", 0, OpenAccess);
        gone.location = a.location;
        gone.value = None;
        for o in [a.clone(), a2, b, far, gone] {
            ds.append(o).unwrap();
        }
        let rows = ds.latest("temperature", &a.location, 1000.0);
        let mut ids: Vec<(&str, Option<f64>)> = rows.iter().map(|o| (o.sensor_id.as_str(), o.value)).collect();
        ids.sort_by(|x, y| x.0.cmp(y.0));
        assert_eq!(ids, vec![("a", Some(11.0)), ("b", Some(9.8))]);
    }

    #[test]
    fn haversine_known_distance() {
        // one degree of latitude on the mean sphere
        let d = haversine_m(
            &Location { lat: 0.0, lon: 0.0, depth_m: 0.0 },
            &Location { lat: 1.0, lon: 0.0, depth_m: 0.0 },
        );
        assert!((d - EARTH_RADIUS_M * std::f64::consts::PI / 180.0).abs() < 1e-6);
    }

    #[test]
    fn journal_replay() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("journal.jsonl");
        {
            let mut ds = DataSpace::open(&p, BTreeSet::from([AttributeFlag::Bad])).unwrap();
            ds.append(obs("s1", 0, OpenAccess)).unwrap();
            ds.append(obs("s1", 1, OpenAccess)).unwrap();
            ds.append(obs("s1", 1, OpenAccess)).unwrap();
        }
        let ds = DataSpace::open(&p, BTreeSet::from([AttributeFlag::Bad])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    }

    #[test]
    fn empty_store_query() {
        let ds = DataSpace::default();
        assert!(ds.query(&Selector::all(), &consumer(&DataCategory::ALL)).unwrap().is_empty());
    }
}
