//! KPI registry with text exposition and SLO evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Millis, Timestamp};

pub type Labels = BTreeMap<String, String>;

/// Builds a label map from pairs.
pub fn labels<const N: usize>(pairs: [(&str, &str); N]) -> Labels {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("counter {0} cannot decrease")]
    NegativeCounterDelta(String),
    #[error("invalid metric or label name {0:?}")]
    InvalidName(String),
    #[error("{0} already registered as another kind")]
    KindMismatch(String),
    #[error("histogram bounds must be finite and strictly increasing")]
    BadBuckets,
}

#[derive(Debug, Clone, PartialEq)]
enum Series {
    Counter {
        value: f64,
        history: Vec<(Timestamp, f64)>,
    },
    Gauge(f64),
    Histogram {
        bounds: Vec<f64>,
        counts: Vec<u64>,
        sum: f64,
        count: u64,
        observations: Vec<(Timestamp, f64)>,
    },
}

impl Series {
    fn kind(&self) -> u8 {
        match self {
            Series::Counter { .. } => 0,
            Series::Gauge(_) => 1,
            Series::Histogram { .. } => 2,
        }
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

/// Metric store. The registry's clock stamps counter and histogram history
/// so rates and percentiles can be taken over windows.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    series: BTreeMap<(String, Labels), Series>,
    now: Timestamp,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_time(&mut self, now: Timestamp) {
        self.now = now;
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    fn entry(&mut self, name: &str, labels: &Labels, fresh: impl FnOnce() -> Series) -> Result<&mut Series, MetricError> {
        if !valid_name(name) {
            return Err(MetricError::InvalidName(name.to_owned()));
        }
        if let Some(bad) = labels.keys().find(|k| !valid_name(k)) {
            return Err(MetricError::InvalidName(bad.clone()));
        }
        let new = fresh();
        let s = self
            .series
            .entry((name.to_owned(), labels.clone()))
            .or_insert_with(|| new.clone());
        if s.kind() != new.kind() {
            return Err(MetricError::KindMismatch(name.to_owned()));
        }
        if let (Series::Histogram { bounds: a, .. }, Series::Histogram { bounds: b, .. }) = (&*s, &new) {
            if a != b {
                return Err(MetricError::KindMismatch(name.to_owned()));
            }
        }
        Ok(s)
    }

    pub fn counter_inc(&mut self, name: &str, labels: &Labels, delta: f64) -> Result<(), MetricError> {
        if !(delta >= 0.0) {
            return Err(MetricError::NegativeCounterDelta(name.to_owned()));
        }
        let now = self.now;
        let s = self.entry(name, labels, || Series::Counter {
            value: 0.0,
            history: Vec::new(),
        })?;
        if let Series::Counter { value, history } = s {
            *value += delta;
            match history.last_mut() {
                Some((t, v)) if *t == now => *v = *value,
                _ => history.push((now, *value)),
            }
        }
        Ok(())
    }

    /// Creates a counter at zero if absent.
    pub fn counter_touch(&mut self, name: &str, labels: &Labels) -> Result<(), MetricError> {
        self.counter_inc(name, labels, 0.0)
    }

    pub fn gauge_set(&mut self, name: &str, labels: &Labels, value: f64) -> Result<(), MetricError> {
        let s = self.entry(name, labels, || Series::Gauge(0.0))?;
        if let Series::Gauge(v) = s {
            *v = value;
        }
        Ok(())
    }

    pub fn histogram_observe(&mut self, name: &str, labels: &Labels, bounds: &[f64], value: f64) -> Result<(), MetricError> {
        if bounds.iter().any(|b| !b.is_finite()) || bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricError::BadBuckets);
        }
        let now = self.now;
        let s = self.entry(name, labels, || Series::Histogram {
            bounds: bounds.to_vec(),
            counts: vec![0; bounds.len()],
            sum: 0.0,
            count: 0,
            observations: Vec::new(),
        })?;
        if let Series::Histogram {
            bounds,
            counts,
            sum,
            count,
            observations,
        } = s
        {
            for (b, c) in bounds.iter().zip(counts.iter_mut()) {
                if value <= *b {
                    *c += 1;
                }
            }
            *sum += value;
            *count += 1;
            observations.push((now, value));
        }
        Ok(())
    }

    /// Creates an empty histogram if absent.
    pub fn histogram_register(&mut self, name: &str, labels: &Labels, bounds: &[f64]) -> Result<(), MetricError> {
        if bounds.iter().any(|b| !b.is_finite()) || bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricError::BadBuckets);
        }
        self.entry(name, labels, || Series::Histogram {
            bounds: bounds.to_vec(),
            counts: vec![0; bounds.len()],
            sum: 0.0,
            count: 0,
            observations: Vec::new(),
        })?;
        Ok(())
    }

    /// Current value of a counter or gauge.
    pub fn value(&self, name: &str, labels: &Labels) -> Option<f64> {
        match self.series.get(&(name.to_owned(), labels.clone()))? {
            Series::Counter { value, .. } => Some(*value),
            Series::Gauge(v) => Some(*v),
            Series::Histogram { .. } => None,
        }
    }

    /// Cumulative count of the bucket with upper bound `le`.
    pub fn bucket(&self, name: &str, labels: &Labels, le: f64) -> Option<u64> {
        match self.series.get(&(name.to_owned(), labels.clone()))? {
            Series::Histogram { bounds, counts, .. } => bounds.iter().position(|b| *b == le).map(|i| counts[i]),
            _ => None,
        }
    }

    /// Sum of a counter over all label sets.
    pub fn counter_total(&self, name: &str) -> f64 {
        self.series
            .iter()
            .filter(|((n, _), _)| n == name)
            .map(|(_, s)| match s {
                Series::Counter { value, .. } => *value,
                _ => 0.0,
            })
            .sum()
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.series.keys().map(|(n, _)| n.clone()).collect();
        v.dedup();
        v
    }
}

/// Sample value text: integers without a fraction, infinities as `+Inf`.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == f64::INFINITY {
        "+Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn escape_label(v: &str) -> String {
    v.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn label_text(labels: &Labels, extra: Option<(&str, &str)>) -> String {
    let mut parts: Vec<String> = labels
        .iter()
        .map(|(k, v)| format!("{k}=\"{}\"", escape_label(v)))
        .collect();
    if let Some((k, v)) = extra {
        parts.push(format!("{k}=\"{}\"", escape_label(v)));
    }
    if parts.is_empty() {
        String::new()
    } else {
        format!("{{{}}}", parts.join(","))
    }
}

/// Text exposition, one sample per line, series ordered by name then labels.
pub fn render_exposition(reg: &Registry) -> String {
    let mut out = String::new();
    for ((name, labels), s) in &reg.series {
        match s {
            Series::Counter { value, .. } => {
                let _ = writeln!(out, "{name}{} {}", label_text(labels, None), format_value(*value));
            }
            Series::Gauge(v) => {
                let _ = writeln!(out, "{name}{} {}", label_text(labels, None), format_value(*v));
            }
            Series::Histogram {
                bounds,
                counts,
                sum,
                count,
                ..
            } => {
                for (b, c) in bounds.iter().zip(counts) {
                    let le = format_value(*b);
                    let _ = writeln!(out, "{name}_bucket{} {c}", label_text(labels, Some(("le", &le))));
                }
                let _ = writeln!(out, "{name}_bucket{} {count}", label_text(labels, Some(("le", "+Inf"))));
                let _ = writeln!(out, "{name}_count{} {count}", label_text(labels, None));
                let _ = writeln!(out, "{name}_sum{} {}", label_text(labels, None), format_value(*sum));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Rate,
    Value,
    P95,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundOp {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloRule {
    pub name: String,
    pub metric: String,
    /// Series must carry these labels; others are free.
    #[serde(default)]
    pub labels: Labels,
    pub aggregation: Aggregation,
    pub op: BoundOp,
    pub threshold: f64,
    pub window_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloBreach {
    pub rule: String,
    pub observed: f64,
    pub op: BoundOp,
    pub threshold: f64,
}

impl SloRule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.window_s > 0.0) {
            return Err(format!("slo {}: window_s must be positive", self.name));
        }
        Ok(())
    }
}

fn value_at(history: &[(Timestamp, f64)], t: Timestamp) -> f64 {
    match history.partition_point(|(ht, _)| *ht <= t) {
        0 => 0.0,
        i => history[i - 1].1,
    }
}

/// Nearest-rank 95th percentile.
pub fn p95(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = (0.95 * values.len() as f64).ceil() as usize;
    Some(values[rank.max(1) - 1])
}

/// Aggregates each rule over matching series and reports violated bounds.
///
/// Rate is the summed counter increase over the window divided by its length
/// in seconds; Value takes the worst current value across series; P95 pools
/// histogram observations inside the window. Rules matching nothing are
/// skipped.
pub fn evaluate_slos(reg: &Registry, rules: &[SloRule], now: Timestamp) -> Vec<SloBreach> {
    let mut out = Vec::new();
    for rule in rules {
        let start = now - Millis::from_secs_f64(rule.window_s);
        let matching: Vec<&Series> = reg
            .series
            .iter()
            .filter(|((n, l), _)| n == &rule.metric && rule.labels.iter().all(|(k, v)| l.get(k) == Some(v)))
            .map(|(_, s)| s)
            .collect();
        let observed = match rule.aggregation {
            Aggregation::Rate => {
                let inc: f64 = matching
                    .iter()
                    .filter_map(|s| match s {
                        Series::Counter { history, .. } => Some(value_at(history, now) - value_at(history, start)),
                        _ => None,
                    })
                    .sum();
                (!matching.is_empty()).then_some(inc / rule.window_s)
            }
            Aggregation::Value => {
                let vals = matching.iter().filter_map(|s| match s {
                    Series::Counter { value, .. } => Some(*value),
                    Series::Gauge(v) => Some(*v),
                    _ => None,
                });
                match rule.op {
                    BoundOp::Le => vals.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
                    BoundOp::Ge => vals.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))),
                }
            }
            Aggregation::P95 => {
                let mut pooled: Vec<f64> = matching
                    .iter()
                    .flat_map(|s| match s {
                        Series::Histogram { observations, .. } => observations
                            .iter()
                            .filter(|(t, _)| *t > start && *t <= now)
                            .map(|(_, v)| *v)
                            .collect(),
                        _ => Vec::new(),
                    })
                    .collect();
                p95(&mut pooled)
            }
        };
        let Some(observed) = observed else { continue };
        let ok = match rule.op {
            BoundOp::Le => observed <= rule.threshold,
            BoundOp::Ge => observed >= rule.threshold,
        };
        if !ok {
            out.push(SloBreach {
                rule: rule.name.clone(),
                observed,
                op: rule.op,
                threshold: rule.threshold,
            });
        }
    }
    out
}

/// Names of the KPI set every scenario run emits.
pub mod kpi {
    pub const INGEST_RECORDS: &str = "ingest_records_total";
    pub const TRANSFORM_ERRORS: &str = "transform_errors_total";
    pub const QC_FLAGS: &str = "qc_flag_total";
    pub const MISSING_ALARMS: &str = "missing_alarms_total";
    pub const BROKER_INFLIGHT: &str = "broker_inflight";
    pub const DELIVERY_LATENCY: &str = "delivery_latency_seconds";
    pub const NODE_BATTERY: &str = "node_battery_j";
    pub const OTA_COST: &str = "ota_cost_total";
    pub const ALARMS: &str = "alarms_total";
    pub const DEDUP_DROPS: &str = "dedup_drops_total";
    pub const STORED: &str = "observations_stored_total";

    /// Delivery latency buckets, seconds.
    pub const LATENCY_BUCKETS: [f64; 8] = [1.0, 5.0, 30.0, 60.0, 300.0, 900.0, 3600.0, 14400.0];

    pub const STANDARD: [&str; 8] = [
        INGEST_RECORDS,
        TRANSFORM_ERRORS,
        QC_FLAGS,
        MISSING_ALARMS,
        BROKER_INFLIGHT,
        DELIVERY_LATENCY,
        NODE_BATTERY,
        OTA_COST,
    ];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::DEFAULT_EPOCH;

    #[test]
    fn counter_basics() {
        let mut r = Registry::new();
        let l = labels([("org", "org7")]);
        r.counter_inc("ingest_records_total", &l, 3.0).unwrap();
        assert_eq!(r.value("ingest_records_total", &l), Some(3.0));
        assert_eq!(
            r.counter_inc("ingest_records_total", &l, -1.0),
            Err(MetricError::NegativeCounterDelta("ingest_records_total".into()))
        );
        assert_eq!(render_exposition(&r), "ingest_records_total{org=\"org7\"} 3\n");
    }

    #[test]
    fn histogram_buckets() {
        let mut r = Registry::new();
        let l = Labels::new();
        r.histogram_observe("delivery_latency_seconds", &l, &[1.0, 5.0, 30.0], 2.3).unwrap();
        assert_eq!(r.bucket("delivery_latency_seconds", &l, 1.0), Some(0));
        assert_eq!(r.bucket("delivery_latency_seconds", &l, 5.0), Some(1));
        assert_eq!(r.bucket("delivery_latency_seconds", &l, 30.0), Some(1));
        let text = render_exposition(&r);
        assert!(text.contains("delivery_latency_seconds_bucket{le=\"5\"} 1\n"));
        assert!(text.contains("delivery_latency_seconds_bucket{le=\"+Inf\"} 1\n"));
        assert!(text.contains("delivery_latency_seconds_sum 2.3\n"));
        assert_eq!(
            r.histogram_observe("bad", &l, &[5.0, 1.0], 1.0),
            Err(MetricError::BadBuckets)
        );
    }

    #[test]
    fn exposition_is_deterministic() {
        assert_eq!(render_exposition(&Registry::new()), "");
        let mut r = Registry::new();
        r.gauge_set("node_battery_j", &labels([("node", "b")]), 2.5).unwrap();
        r.gauge_set("node_battery_j", &labels([("node", "a")]), 1.0).unwrap();
        r.counter_inc("a_total", &Labels::new(), 1.0).unwrap();
        let one = render_exposition(&r);
        assert_eq!(one, render_exposition(&r));
        assert_eq!(
            one,
            "a_total 1\nnode_battery_j{node=\"a\"} 1\nnode_battery_j{node=\"b\"} 2.5\n"
        );
    }

    #[test]
    fn names_and_kinds_checked() {
        let mut r = Registry::new();
        assert!(matches!(r.counter_inc("Bad-Name", &Labels::new(), 1.0), Err(MetricError::InvalidName(_))));
        r.gauge_set("x", &Labels::new(), 1.0).unwrap();
        assert!(matches!(r.counter_inc("x", &Labels::new(), 1.0), Err(MetricError::KindMismatch(_))));
        assert_eq!(
            render_exposition(&{
                let mut r = Registry::new();
                r.gauge_set("q", &labels([("k", "a\"b\\c")]), 0.5).unwrap();
                r
            }),
            "q{k=\"a\\\"b\\\\c\"} 0.5\n"
        );
    }

    fn rule(metric: &str, agg: Aggregation, op: BoundOp, threshold: f64) -> SloRule {
        SloRule {
            name: format!("{metric}-slo"),
            metric: metric.into(),
            labels: Labels::new(),
            aggregation: agg,
            op,
            threshold,
            window_s: 3600.0,
        }
    }

    #[test]
    fn slo_cases() {
        let mut r = Registry::new();
        r.set_time(DEFAULT_EPOCH);
        r.counter_inc("missing_alarms_total", &Labels::new(), 2.0).unwrap();
        let now = DEFAULT_EPOCH + Millis::from_secs(60);
        let rate = rule("missing_alarms_total", Aggregation::Rate, BoundOp::Le, 0.0);
        assert_eq!(evaluate_slos(&r, std::slice::from_ref(&rate), now).len(), 1);
        assert!(evaluate_slos(&r, &[], now).is_empty());
        // two hours later the increase has left the window
        assert!(evaluate_slos(&r, std::slice::from_ref(&rate), now + Millis::from_secs(7200)).is_empty());

        r.gauge_set("node_battery_j", &labels([("node", "n1")]), 500.0).unwrap();
        let b = evaluate_slos(&r, &[rule("node_battery_j", Aggregation::Value, BoundOp::Ge, 1000.0)], now);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].observed, 500.0);
    }

    #[test]
    fn p95_over_window() {
        let mut r = Registry::new();
        r.set_time(DEFAULT_EPOCH + Millis(1));
        for i in 1..=100 {
            r.histogram_observe("delivery_latency_seconds", &Labels::new(), &kpi::LATENCY_BUCKETS, i as f64)
                .unwrap();
        }
        let rules = [rule("delivery_latency_seconds", Aggregation::P95, BoundOp::Le, 90.0)];
        let b = evaluate_slos(&r, &rules, DEFAULT_EPOCH + Millis(10));
        assert_eq!(b[0].observed, 95.0);
    }
}
