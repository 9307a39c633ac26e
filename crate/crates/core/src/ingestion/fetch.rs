//! Platform pull: a cursor over measurement time, polled on a fixed interval
//! with exponential backoff while the source is down.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{Fields, RawRecord, WireFormat};
use crate::time::{Millis, Timestamp};

pub const BACKOFF_BASE_S: f64 = 2.0;
pub const BACKOFF_CAP_S: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FetchError {
    #[error("poll not due until {0}")]
    NotDue(Timestamp),
    #[error("source unavailable: {reason}; retry at {retry_at}")]
    SourceUnavailable { reason: String, retry_at: Timestamp },
}

/// Where a fetcher reads from.
pub trait RecordSource {
    /// Every record with measurement time at or after `since` (all when
    /// `None`). Returning more is allowed; the fetcher filters.
    fn records_since(&mut self, since: Option<Timestamp>) -> Result<Vec<Fields>, String>;
}

/// The platform's own archive, filled as its uplinks arrive.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub records: Vec<(Timestamp, Fields)>,
    pub available: bool,
}

impl MemorySource {
    pub fn new() -> Self {
        MemorySource {
            records: Vec::new(),
            available: true,
        }
    }

    pub fn push(&mut self, measured_at: Timestamp, fields: Fields) {
        self.records.push((measured_at, fields));
    }
}

impl RecordSource for MemorySource {
    fn records_since(&mut self, since: Option<Timestamp>) -> Result<Vec<Fields>, String> {
        if !self.available {
            return Err("source offline".into());
        }
        Ok(self
            .records
            .iter()
            .filter(|(t, _)| since.map_or(true, |s| *t >= s))
            .map(|(_, f)| f.clone())
            .collect())
    }
}

/// A JSON-lines file, one record object per line.
#[derive(Debug, Clone)]
pub struct JsonLinesSource {
    pub path: PathBuf,
}

impl RecordSource for JsonLinesSource {
    fn records_since(&mut self, _since: Option<Timestamp>) -> Result<Vec<Fields>, String> {
        let file = std::fs::File::open(&self.path).map_err(|e| format!("{}: {e}", self.path.display()))?;
        let mut out = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Fields = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
            out.push(f);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchSource {
    pub source_id: String,
    pub org_id: String,
    pub format: WireFormat,
    pub poll_interval_s: f64,
    /// Latest measurement time handed out so far.
    pub cursor: Option<Timestamp>,
    /// Sensors already handed out at exactly `cursor`. Empty for a cursor
    /// set from outside, which then excludes its own instant.
    pub at_cursor: BTreeSet<String>,
    pub last_poll: Option<Timestamp>,
    pub failures: u32,
    pub retry_at: Option<Timestamp>,
}

impl FetchSource {
    pub fn new(source_id: &str, org_id: &str, format: WireFormat, poll_interval_s: f64) -> Self {
        assert!(poll_interval_s > 0.0, "poll interval must be positive");
        FetchSource {
            source_id: source_id.to_owned(),
            org_id: org_id.to_owned(),
            format,
            poll_interval_s,
            cursor: None,
            at_cursor: BTreeSet::new(),
            last_poll: None,
            failures: 0,
            retry_at: None,
        }
    }

    pub fn next_due(&self) -> Option<Timestamp> {
        if let Some(r) = self.retry_at {
            return Some(r);
        }
        self.last_poll.map(|t| t.plus_secs(self.poll_interval_s))
    }

    pub fn is_due(&self, now: Timestamp) -> bool {
        self.next_due().map_or(true, |d| now >= d)
    }
}

/// Delay after the `failures`-th consecutive failure.
pub fn backoff(failures: u32) -> Millis {
    let secs = BACKOFF_BASE_S * 2f64.powi(failures.saturating_sub(1).min(30) as i32);
    Millis::from_secs_f64(secs.min(BACKOFF_CAP_S))
}

/// Returns records strictly newer than the cursor (plus same-instant records
/// from sensors not yet seen at the cursor) and advances the cursor.
/// Records with no readable sensor or time are skipped.
pub fn fetch_poll<S: RecordSource + ?Sized>(
    src: &mut FetchSource,
    backend: &mut S,
    now: Timestamp,
) -> Result<Vec<RawRecord>, FetchError> {
    if !src.is_due(now) {
        return Err(FetchError::NotDue(src.next_due().expect("due time known")));
    }
    let fields = match backend.records_since(src.cursor) {
        Ok(f) => f,
        Err(reason) => {
            src.failures += 1;
            let retry_at = now + backoff(src.failures);
            src.retry_at = Some(retry_at);
            return Err(FetchError::SourceUnavailable { reason, retry_at });
        }
    };
    src.failures = 0;
    src.retry_at = None;
    src.last_poll = Some(now);
    let vocab = src.format.vocabulary();
    let mut keyed: Vec<(Timestamp, String, Fields)> = fields
        .into_iter()
        .filter_map(|f| {
            let sensor = f.get(vocab.sensor_id)?.to_string();
            let t = Timestamp::parse_rfc3339(f.get(vocab.measured_at)?.as_text()?)?;
            Some((t, sensor, f))
        })
        .filter(|(t, s, _)| match src.cursor {
            None => true,
            Some(c) => *t > c || (*t == c && !src.at_cursor.is_empty() && !src.at_cursor.contains(s)),
        })
        .collect();
    keyed.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    keyed.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    if let Some(max) = keyed.last().map(|k| k.0) {
        if src.cursor != Some(max) {
            src.at_cursor.clear();
        }
        src.cursor = Some(max);
        src.at_cursor
            .extend(keyed.iter().filter(|k| k.0 == max).map(|k| k.1.clone()));
    }
    Ok(keyed
        .into_iter()
        .map(|(_, _, fields)| RawRecord {
            org_id: src.org_id.clone(),
            source_format: src.format,
            fields,
            received_at: now,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::wire::Scalar;
    use crate::time::DEFAULT_EPOCH;
    use proptest::prelude::*;

    fn rec(sensor: &str, h: i64) -> (Timestamp, Fields) {
        let t = DEFAULT_EPOCH + Millis(h * 3_600_000);
        let mut f = Fields::new();
        f.insert("sensor".into(), Scalar::Text(sensor.into()));
        f.insert("time".into(), Scalar::Text(t.to_rfc3339()));
        f.insert("value".into(), Scalar::Text("1".into()));
        (t, f)
    }

    fn src() -> FetchSource {
        FetchSource::new("mesh1", "org8", WireFormat::XmlV1, 300.0)
    }

    fn at(s: i64) -> Timestamp {
        DEFAULT_EPOCH + Millis(s * 1000)
    }

    #[test]
    fn cursor_semantics() {
        let mut backend = MemorySource::new();
        for h in 1..=5 {
            let (t, f) = rec("s1", h);
            backend.push(t, f);
        }
        let mut s = src();
        s.cursor = Some(backend.records[1].0);
        let got = fetch_poll(&mut s, &mut backend, at(0)).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(s.cursor, Some(backend.records[4].0));
        assert!(fetch_poll(&mut s, &mut backend, at(300)).unwrap().is_empty());
    }

    #[test]
    fn not_due_before_interval() {
        let mut backend = MemorySource::new();
        let mut s = src();
        fetch_poll(&mut s, &mut backend, at(0)).unwrap();
        assert_eq!(fetch_poll(&mut s, &mut backend, at(299)), Err(FetchError::NotDue(at(300))));
    }

    #[test]
    fn unavailable_keeps_cursor_and_backs_off() {
        let mut backend = MemorySource::new();
        let (t, f) = rec("s1", 1);
        backend.push(t, f);
        let mut s = src();
        fetch_poll(&mut s, &mut backend, at(0)).unwrap();
        backend.available = false;
        let before = s.cursor;
        let e = fetch_poll(&mut s, &mut backend, at(300)).unwrap_err();
        assert_eq!(e, FetchError::SourceUnavailable { reason: "source offline".into(), retry_at: at(302) });
        assert_eq!(s.cursor, before);
        let e = fetch_poll(&mut s, &mut backend, at(302)).unwrap_err();
        assert!(matches!(e, FetchError::SourceUnavailable { retry_at, .. } if retry_at == at(306)));
        assert_eq!(backoff(20), Millis::from_secs(300));
    }

    #[test]
    fn same_instant_other_sensor_not_lost() {
        let mut backend = MemorySource::new();
        let (t, f) = rec("s1", 1);
        backend.push(t, f);
        let mut s = src();
        assert_eq!(fetch_poll(&mut s, &mut backend, at(0)).unwrap().len(), 1);
        let (t, f) = rec("s2", 1);
        backend.push(t, f);
        assert_eq!(fetch_poll(&mut s, &mut backend, at(300)).unwrap().len(), 1);
        assert!(fetch_poll(&mut s, &mut backend, at(600)).unwrap().is_empty());
    }

    #[test]
    fn jsonl_file_source() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("src.jsonl");
        let lines: Vec<String> = (1..=3)
            .map(|h| serde_json::to_string(&rec("s1", h).1).unwrap())
            .collect();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let mut backend = JsonLinesSource { path };
        let mut s = src();
        assert_eq!(fetch_poll(&mut s, &mut backend, at(0)).unwrap().len(), 3);
    }

    fn emitted(got: Vec<RawRecord>) -> Vec<(String, Timestamp)> {
        got.iter()
            .map(|r| {
                let t = Timestamp::parse_rfc3339(r.get("time").unwrap().as_text().unwrap()).unwrap();
                (r.get("sensor").unwrap().to_string(), t)
            })
            .collect()
    }

    proptest! {
        // Records landing in measurement-time order, polled on any schedule,
        // come out exactly once each.
        #[test]
        fn idempotent_over_any_schedule(
            keys in prop::collection::btree_set((0i64..30, 0usize..3), 1..40),
            polls in prop::collection::vec(0usize..3, 40),
            initial in prop::option::of(0i64..30),
        ) {
            let mut backend = MemorySource::new();
            let mut s = src();
            s.cursor = initial.map(|h| DEFAULT_EPOCH + Millis(h * 3_600_000));
            let mut out = Vec::new();
            let mut now = 0;
            for (i, (h, sensor)) in keys.iter().enumerate() {
                let (t, f) = rec(&format!("s{sensor}"), *h);
                backend.push(t, f);
                for _ in 0..polls[i] {
                    now += 300;
                    out.extend(emitted(fetch_poll(&mut s, &mut backend, at(now)).unwrap()));
                }
            }
            now += 300;
            out.extend(emitted(fetch_poll(&mut s, &mut backend, at(now)).unwrap()));
            let expected: Vec<(String, Timestamp)> = keys
                .iter()
                .map(|(h, sensor)| (format!("s{sensor}"), DEFAULT_EPOCH + Millis(h * 3_600_000)))
                .filter(|(_, t)| initial.map_or(true, |c| *t > DEFAULT_EPOCH + Millis(c * 3_600_000)))
                .collect();
            let mut got = out.clone();
            got.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
            let mut want = expected.clone();
            want.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
            prop_assert_eq!(got, want);
        }
    }
}
