//! Stream quality control over the four inherent attributes, missing-value
//! synthesis on gaps, and alarms.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::broker::topic::TopicPath;
use crate::model::{observation_id, worst_flag, AttributeFlag, DataCategory, Location, Observation, QcReport, SchemaVersion};
use crate::time::{Millis, Timestamp};

pub const STAGE: &str = "qc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlarmKind {
    MissingData,
    QcBad,
    SessionFailed,
    LowBattery,
}

impl AlarmKind {
    pub const ALL: [AlarmKind; 4] = [
        AlarmKind::MissingData,
        AlarmKind::QcBad,
        AlarmKind::SessionFailed,
        AlarmKind::LowBattery,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            AlarmKind::MissingData => "missing_data",
            AlarmKind::QcBad => "qc_bad",
            AlarmKind::SessionFailed => "session_failed",
            AlarmKind::LowBattery => "low_battery",
        }
    }
}

impl fmt::Display for AlarmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub kind: AlarmKind,
    pub org_id: String,
    /// Stream key `sensor/parameter`, node id or client id.
    pub key: String,
    pub at: Timestamp,
    pub detail: String,
}

impl Alarm {
    /// `alarms/<org>/<kind>`
    pub fn topic(&self) -> TopicPath {
        TopicPath::from_levels(["alarms", &self.org_id, self.kind.slug()]).expect("org ids are topic-safe")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    pub neighbor_radius_m: f64,
    pub max_delta: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            neighbor_radius_m: 1000.0,
            max_delta: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcConfig {
    pub spike_k: f64,
    pub stuck_n: u32,
    pub window: usize,
    /// Absent means twice the stream's expected interval.
    pub currentness_max_age_s: Option<f64>,
    /// Window values older than this are dropped. Absent means twice the
    /// window's nominal span (`window` × expected interval).
    pub window_max_age_s: Option<f64>,
    pub consistency: ConsistencyConfig,
    pub gap_tolerance_factor: f64,
    /// Gap points older than this (relative to now) are not synthesized.
    pub alarm_horizon_s: f64,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            spike_k: 6.0,
            stuck_n: 5,
            window: 20,
            currentness_max_age_s: None,
            window_max_age_s: None,
            consistency: ConsistencyConfig::default(),
            gap_tolerance_factor: 1.5,
            alarm_horizon_s: 86_400.0,
        }
    }
}

impl QcConfig {
    pub fn validate(&self) -> Result<(), String> {
        let pos = [
            ("spike_k", self.spike_k),
            ("consistency.neighbor_radius_m", self.consistency.neighbor_radius_m),
            ("consistency.max_delta", self.consistency.max_delta),
            ("gap_tolerance_factor", self.gap_tolerance_factor),
            ("alarm_horizon_s", self.alarm_horizon_s),
            ("currentness_max_age_s", self.currentness_max_age_s.unwrap_or(1.0)),
            ("window_max_age_s", self.window_max_age_s.unwrap_or(1.0)),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.stuck_n == 0 {
            return Err("stuck_n must be positive".into());
        }
        if self.window < 5 {
            return Err("window must hold at least 5 values".into());
        }
        if self.gap_tolerance_factor < 1.0 {
            return Err("gap_tolerance_factor must be at least 1".into());
        }
        Ok(())
    }

    fn max_age(&self, expected_interval_s: Option<f64>) -> Option<Millis> {
        self.currentness_max_age_s
            .or(expected_interval_s.map(|i| 2.0 * i))
            .map(Millis::from_secs_f64)
    }

    fn window_max_age(&self, expected_interval_s: Option<f64>) -> Option<Millis> {
        self.window_max_age_s
            .or(expected_interval_s.map(|i| 2.0 * self.window as f64 * i))
            .map(Millis::from_secs_f64)
    }
}

/// What the registry knows about a stream's source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub sensor_id: String,
    pub org_id: String,
    pub platform_id: String,
    pub parameter: String,
    pub unit: String,
    pub location: Location,
    pub expected_interval_s: f64,
    pub valid_min: f64,
    pub valid_max: f64,
    /// Sampling stops here; no gaps are synthesized at or after it.
    #[serde(default)]
    pub active_until: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub key: (String, String),
    pub info: Option<SensorInfo>,
    pub last_seen: Timestamp,
    pub window: VecDeque<(Timestamp, f64)>,
    pub stuck_run: u32,
    pub last_value: Option<f64>,
}

impl StreamState {
    /// State for a registered sensor whose first reading is due at `first_due`.
    pub fn registered(info: SensorInfo, first_due: Timestamp) -> Self {
        let anchor = first_due - Millis::from_secs_f64(info.expected_interval_s);
        StreamState {
            key: (info.sensor_id.clone(), info.parameter.clone()),
            info: Some(info),
            last_seen: anchor,
            window: VecDeque::new(),
            stuck_run: 0,
            last_value: None,
        }
    }

    pub fn unregistered(sensor_id: &str, parameter: &str, first: Timestamp) -> Self {
        StreamState {
            key: (sensor_id.to_owned(), parameter.to_owned()),
            info: None,
            last_seen: first,
            window: VecDeque::new(),
            stuck_run: 0,
            last_value: None,
        }
    }

    fn interval_s(&self) -> Option<f64> {
        self.info.as_ref().map(|i| i.expected_interval_s)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median and median absolute deviation.
pub fn median_mad(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut v: Vec<f64> = values.collect();
    let med = median(&mut v);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    (med, median(&mut dev))
}

/// Range, spike and stuck checks. `state` holds history before `obs`.
pub fn check_accuracy(obs: &Observation, state: &StreamState, cfg: &QcConfig) -> AttributeFlag {
    let Some(v) = obs.value else {
        return AttributeFlag::NotEvaluated;
    };
    if let Some(info) = &state.info {
        if v < info.valid_min || v > info.valid_max {
            return AttributeFlag::Bad;
        }
    }
    let run = if state.last_value == Some(v) { state.stuck_run + 1 } else { 1 };
    if run >= cfg.stuck_n {
        return AttributeFlag::ProbablyBad;
    }
    let oldest = cfg
        .window_max_age(state.interval_s())
        .map_or(Timestamp(i64::MIN), |age| obs.measured_at - age);
    let fresh = || state.window.iter().filter(|(t, _)| *t >= oldest).map(|(_, x)| *x);
    if fresh().count() < cfg.window {
        return AttributeFlag::ProbablyGood;
    }
    let (med, mad) = median_mad(fresh());
    if (v - med).abs() > cfg.spike_k * mad {
        return AttributeFlag::ProbablyBad;
    }
    AttributeFlag::Good
}

/// Synthesizes one missing observation and alarm per expected grid point
/// whose tolerance has run out by `now`. Advances `last_seen` to the last
/// point emitted, so calling again at the same `now` emits nothing.
pub fn check_completeness(state: &mut StreamState, now: Timestamp, cfg: &QcConfig) -> Vec<(Observation, Alarm)> {
    let Some(info) = state.info.clone() else {
        return Vec::new();
    };
    let interval = Millis::from_secs_f64(info.expected_interval_s);
    let slack = Millis::from_secs_f64((cfg.gap_tolerance_factor - 1.0) * info.expected_interval_s);
    let horizon = now - Millis::from_secs_f64(cfg.alarm_horizon_s);
    let mut out = Vec::new();
    loop {
        let point = state.last_seen + interval;
        if point + slack > now || info.active_until.is_some_and(|end| point >= end) {
            break;
        }
        state.last_seen = point;
        if point < horizon {
            continue;
        }
        let obs = missing_observation(&info, point, now);
        let alarm = Alarm {
            kind: AlarmKind::MissingData,
            org_id: info.org_id.clone(),
            key: format!("{}/{}", info.sensor_id, info.parameter),
            at: now,
            detail: format!("no reading for {}", point.to_rfc3339()),
        };
        out.push((obs, alarm));
    }
    out
}

fn missing_observation(info: &SensorInfo, at: Timestamp, now: Timestamp) -> Observation {
    let qc = QcReport::new(
        AttributeFlag::NotEvaluated,
        AttributeFlag::Missing,
        AttributeFlag::NotEvaluated,
        AttributeFlag::NotEvaluated,
    );
    Observation {
        schema_version: SchemaVersion,
        observation_id: observation_id(&info.org_id, &info.sensor_id, at),
        org_id: info.org_id.clone(),
        platform_id: info.platform_id.clone(),
        sensor_id: info.sensor_id.clone(),
        parameter: info.parameter.clone(),
        unit: info.unit.clone(),
        value: None,
        measured_at: at,
        ingested_at: now,
        location: info.location,
        qc,
        category: DataCategory::default(),
        lineage: Vec::new(),
    }
    .append_lineage(STAGE, now, "synthesized missing")
    .expect("first lineage step")
}

/// Compares against the median of neighboring sensors' latest values.
pub fn check_consistency(obs: &Observation, neighbors: &[f64], cfg: &QcConfig) -> AttributeFlag {
    let Some(v) = obs.value else {
        return AttributeFlag::NotEvaluated;
    };
    if neighbors.is_empty() {
        return AttributeFlag::NotEvaluated;
    }
    let med = median(&mut neighbors.to_vec());
    if (v - med).abs() > cfg.consistency.max_delta {
        AttributeFlag::ProbablyBad
    } else {
        AttributeFlag::Good
    }
}

pub fn check_currentness(obs: &Observation, now: Timestamp, max_age: Millis) -> AttributeFlag {
    let age = now - obs.measured_at;
    if age <= max_age {
        AttributeFlag::Good
    } else if age.0 <= max_age.0 * 10 {
        AttributeFlag::ProbablyBad
    } else {
        AttributeFlag::Bad
    }
}

/// All four checks on an arriving observation. Synthesized missing
/// observations pass through with their Missing verdict and no alarm.
pub fn run_qc(
    obs: Observation,
    state: &mut StreamState,
    now: Timestamp,
    cfg: &QcConfig,
    neighbors: &[f64],
) -> (Observation, Vec<Alarm>) {
    let Some(v) = obs.value else {
        return (obs, Vec::new());
    };
    let accuracy = check_accuracy(&obs, state, cfg);
    let consistency = check_consistency(&obs, neighbors, cfg);
    let currentness = match cfg.max_age(state.interval_s()) {
        Some(max) => check_currentness(&obs, now, max),
        None => AttributeFlag::NotEvaluated,
    };
    let qc = QcReport::new(accuracy, AttributeFlag::Good, consistency, currentness);
    debug_assert_eq!(qc.overall, worst_flag(qc.attributes().map(|(_, f)| f)));

    state.stuck_run = if state.last_value == Some(v) { state.stuck_run + 1 } else { 1 };
    state.last_value = Some(v);
    // a frozen run would collapse the MAD to zero and flag the clean readings after it
    if accuracy != AttributeFlag::Bad && state.stuck_run < cfg.stuck_n {
        state.window.push_back((obs.measured_at, v));
        while state.window.len() > cfg.window {
            state.window.pop_front();
        }
    }
    if let Some(age) = cfg.window_max_age(state.interval_s()) {
        let oldest = obs.measured_at - age;
        while state.window.front().is_some_and(|(t, _)| *t < oldest) {
            state.window.pop_front();
        }
    }
    state.last_seen = state.last_seen.max(obs.measured_at);

    let mut alarms = Vec::new();
    if qc.overall == AttributeFlag::Bad {
        let flagged: Vec<&str> = qc
            .attributes()
            .iter()
            .filter(|(_, f)| *f == AttributeFlag::Bad)
            .map(|(n, _)| *n)
            .collect();
        alarms.push(Alarm {
            kind: AlarmKind::QcBad,
            org_id: obs.org_id.clone(),
            key: format!("{}/{}", obs.sensor_id, obs.parameter),
            at: now,
            detail: format!("{} bad at {}", flagged.join(","), obs.measured_at.to_rfc3339()),
        });
    }
    let detail = format!("overall {}", qc.overall);
    let obs = Observation { qc, ..obs }
        .append_lineage(STAGE, now, detail)
        .expect("qc runs after ingestion");
    (obs, alarms)
}

/// Per-stream QC state for a pipeline.
#[derive(Debug, Clone, Default)]
pub struct QcEngine {
    pub cfg: QcConfig,
    streams: BTreeMap<(String, String), StreamState>,
}

impl QcEngine {
    pub fn new(cfg: QcConfig) -> Self {
        QcEngine {
            cfg,
            streams: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, info: SensorInfo, first_due: Timestamp) {
        let s = StreamState::registered(info, first_due);
        self.streams.insert(s.key.clone(), s);
    }

    pub fn stream(&self, sensor_id: &str, parameter: &str) -> Option<&StreamState> {
        self.streams.get(&(sensor_id.to_owned(), parameter.to_owned()))
    }

    pub fn process(&mut self, obs: Observation, now: Timestamp, neighbors: &[f64]) -> (Observation, Vec<Alarm>) {
        let key = (obs.sensor_id.clone(), obs.parameter.clone());
        let state = self
            .streams
            .entry(key)
            .or_insert_with(|| StreamState::unregistered(&obs.sensor_id, &obs.parameter, obs.measured_at));
        run_qc(obs, state, now, &self.cfg, neighbors)
    }

    /// Completeness over every registered stream.
    pub fn tick(&mut self, now: Timestamp) -> Vec<(Observation, Alarm)> {
        let cfg = self.cfg;
        self.streams
            .values_mut()
            .flat_map(|s| check_completeness(s, now, &cfg))
            .collect()
    }

    /// Longest tolerance slack over registered streams.
    pub fn max_slack(&self) -> Millis {
        self.streams
            .values()
            .filter_map(|s| s.interval_s())
            .map(|i| Millis::from_secs_f64((self.cfg.gap_tolerance_factor - 1.0) * i))
            .max()
            .unwrap_or(Millis(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;
    use crate::time::DEFAULT_EPOCH;

    fn info(interval: f64) -> SensorInfo {
        SensorInfo {
            sensor_id: "s1".into(),
            org_id: "org7".into(),
            platform_id: "p1".into(),
            parameter: "temperature".into(),
            unit: "Cel".into(),
            location: Location {
                lat: 41.0,
                lon: -8.7,
                depth_m: 5.0,
            },
            expected_interval_s: interval,
            valid_min: -2.0,
            valid_max: 40.0,
            active_until: None,
        }
    }

    fn obs(v: f64, t: Timestamp) -> Observation {
        let mut o = fixtures::observation();
        o.sensor_id = "s1".into();
        o.parameter = "temperature".into();
        o.value = Some(v);
        o.measured_at = t;
        o.ingested_at = t;
        o.lineage.clear();
        o.append_lineage("transform", t, "").unwrap()
    }

    fn state_with(values: &[f64]) -> StreamState {
        let mut s = StreamState::registered(info(60.0), DEFAULT_EPOCH);
        for (i, v) in values.iter().enumerate() {
            s.window.push_back((DEFAULT_EPOCH + Millis(i as i64 * 60_000), *v));
        }
        s.last_value = values.last().copied();
        s
    }

    #[test]
    fn accuracy_cases() {
        let cfg = QcConfig::default();
        let flat = state_with(&[10.0; 20]);
        assert_eq!(check_accuracy(&obs(10.0, DEFAULT_EPOCH), &flat, &cfg), AttributeFlag::Good);
        assert_eq!(check_accuracy(&obs(41.0, DEFAULT_EPOCH), &flat, &cfg), AttributeFlag::Bad);
        let short = state_with(&[10.0, 10.1]);
        assert_eq!(check_accuracy(&obs(10.2, DEFAULT_EPOCH), &short, &cfg), AttributeFlag::ProbablyGood);
    }

    #[test]
    fn spike_against_median_and_mad() {
        // 9.9, 10.1 alternating: median 10.0, every deviation 0.1, MAD 0.1,
        // threshold 6 * 0.1 = 0.6, and |60 - 10| = 50 is far beyond it.
        let series: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 9.9 } else { 10.1 }).collect();
        let (med, mad) = median_mad(series.iter().copied());
        assert!((med - 10.0).abs() < 1e-12);
        assert!((mad - 0.1).abs() < 1e-12);
        let mut s = state_with(&series);
        s.info.as_mut().unwrap().valid_max = 100.0;
        let cfg = QcConfig::default();
        assert_eq!(check_accuracy(&obs(60.0, DEFAULT_EPOCH), &s, &cfg), AttributeFlag::ProbablyBad);
        assert_eq!(check_accuracy(&obs(10.5, DEFAULT_EPOCH), &s, &cfg), AttributeFlag::Good);
    }

    #[test]
    fn stuck_run_flags() {
        let cfg = QcConfig::default();
        let mut s = StreamState::registered(info(60.0), DEFAULT_EPOCH);
        let mut flags = Vec::new();
        for i in 0..6 {
            let (o, _) = run_qc(obs(12.0, DEFAULT_EPOCH + Millis(i * 60_000)), &mut s, DEFAULT_EPOCH + Millis(i * 60_000), &cfg, &[]);
            flags.push(o.qc.accuracy);
        }
        assert_eq!(flags[3], AttributeFlag::ProbablyGood);
        assert_eq!(flags[4], AttributeFlag::ProbablyBad);
        assert_eq!(flags[5], AttributeFlag::ProbablyBad);
    }

    #[test]
    fn stuck_values_stay_out_of_the_window() {
        let cfg = QcConfig::default();
        let mut s = StreamState::registered(info(60.0), DEFAULT_EPOCH);
        let at = |i: i64| DEFAULT_EPOCH + Millis(i * 60_000);
        for i in 0..20 {
            let v = 12.0 + if i % 2 == 0 { 0.05 } else { -0.05 };
            run_qc(obs(v, at(i)), &mut s, at(i), &cfg, &[]);
        }
        for i in 20..60 {
            run_qc(obs(12.0, at(i)), &mut s, at(i), &cfg, &[]);
        }
        assert!(s.window.iter().filter(|(_, v)| *v == 12.0).count() < cfg.stuck_n as usize);
        // the pre-freeze values aged out, so the window refills before judging
        let (o, _) = run_qc(obs(12.4, at(60)), &mut s, at(60), &cfg, &[]);
        assert_eq!(o.qc.accuracy, AttributeFlag::ProbablyGood);
    }

    #[test]
    fn window_ages_out() {
        let cfg = QcConfig {
            window_max_age_s: Some(600.0),
            ..QcConfig::default()
        };
        let mut s = StreamState::registered(info(60.0), DEFAULT_EPOCH);
        for i in 0..20 {
            let t = DEFAULT_EPOCH + Millis(i * 60_000);
            run_qc(obs(10.0 + i as f64 * 0.01, t), &mut s, t, &cfg, &[]);
        }
        assert_eq!(s.window.len(), 11);
        let late = DEFAULT_EPOCH + Millis(3_600_000);
        assert_eq!(check_accuracy(&obs(10.0, late), &s, &cfg), AttributeFlag::ProbablyGood);
        run_qc(obs(10.0, late), &mut s, late, &cfg, &[]);
        assert_eq!(s.window.len(), 1);
    }

    #[test]
    fn completeness_grid() {
        let cfg = QcConfig::default();
        let mut s = StreamState::registered(info(1800.0), DEFAULT_EPOCH + Millis(1_800_000));
        s.last_seen = DEFAULT_EPOCH;
        // 1.5 intervals of tolerance: nothing before 2700 s of silence
        assert!(check_completeness(&mut s, DEFAULT_EPOCH + Millis(2_699_000), &cfg).is_empty());
        let now = DEFAULT_EPOCH + Millis(5_400_000);
        let out = check_completeness(&mut s, now, &cfg);
        let times: Vec<_> = out.iter().map(|(o, _)| o.measured_at).collect();
        assert_eq!(times, vec![DEFAULT_EPOCH + Millis(1_800_000), DEFAULT_EPOCH + Millis(3_600_000)]);
        for (o, a) in &out {
            assert_eq!(o.value, None);
            assert_eq!(o.qc.completeness, AttributeFlag::Missing);
            assert_eq!(o.qc.overall, AttributeFlag::Missing);
            assert_eq!(a.kind, AlarmKind::MissingData);
            assert!(crate::model::validate_observation(o).is_empty());
        }
        assert!(check_completeness(&mut s, now, &cfg).is_empty());
    }

    #[test]
    fn completeness_respects_active_until() {
        let cfg = QcConfig::default();
        let mut i = info(3600.0);
        i.active_until = Some(DEFAULT_EPOCH + Millis(2 * 3_600_000));
        let mut s = StreamState::registered(i, DEFAULT_EPOCH);
        let out = check_completeness(&mut s, DEFAULT_EPOCH + Millis(10 * 3_600_000), &cfg);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn consistency_cases() {
        let cfg = QcConfig {
            consistency: ConsistencyConfig {
                neighbor_radius_m: 1000.0,
                max_delta: 2.0,
            },
            ..QcConfig::default()
        };
        let o = obs(10.0, DEFAULT_EPOCH);
        assert_eq!(check_consistency(&o, &[], &cfg), AttributeFlag::NotEvaluated);
        assert_eq!(check_consistency(&o, &[10.2, 9.9], &cfg), AttributeFlag::Good);
        assert_eq!(check_consistency(&o, &[20.0, 21.0], &cfg), AttributeFlag::ProbablyBad);
    }

    #[test]
    fn currentness_cases() {
        let o = obs(10.0, DEFAULT_EPOCH);
        let max = Millis::from_secs(60);
        let at = |s| DEFAULT_EPOCH + Millis::from_secs(s);
        assert_eq!(check_currentness(&o, at(5), max), AttributeFlag::Good);
        assert_eq!(check_currentness(&o, at(300), max), AttributeFlag::ProbablyBad);
        assert_eq!(check_currentness(&o, at(3 * 3600), max), AttributeFlag::Bad);
    }

    #[test]
    fn run_qc_outcomes() {
        let cfg = QcConfig::default();
        let mut s = state_with(&(0..20).map(|i| 12.0 + 0.01 * i as f64).collect::<Vec<_>>());
        let (clean, alarms) = run_qc(obs(12.1, DEFAULT_EPOCH), &mut s, DEFAULT_EPOCH, &cfg, &[]);
        assert_eq!(clean.qc.accuracy, AttributeFlag::Good);
        assert_eq!(clean.qc.overall, AttributeFlag::Good);
        assert!(alarms.is_empty());
        assert_eq!(clean.lineage.last().unwrap().stage, STAGE);
        assert_eq!(clean.value, Some(12.1));

        let (bad, alarms) = run_qc(obs(99.0, DEFAULT_EPOCH), &mut s, DEFAULT_EPOCH, &cfg, &[]);
        assert_eq!(bad.qc.overall, AttributeFlag::Bad);
        assert_eq!(alarms.len(), 1);
        assert_eq!(alarms[0].kind, AlarmKind::QcBad);
        assert_eq!(alarms[0].topic().as_str(), "alarms/org7/qc_bad");
        assert_eq!(bad.value, Some(99.0));

        let mut s2 = StreamState::registered(info(60.0), DEFAULT_EPOCH);
        s2.last_seen = DEFAULT_EPOCH - Millis::from_secs(600);
        let (missing, _) = check_completeness(&mut s2, DEFAULT_EPOCH, &cfg).remove(0);
        let (m, alarms) = run_qc(missing, &mut s2, DEFAULT_EPOCH, &cfg, &[]);
        assert_eq!(m.qc.overall, AttributeFlag::Missing);
        assert!(alarms.is_empty());
    }
}
