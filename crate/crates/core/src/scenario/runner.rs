//! Deterministic end-to-end run of a scenario on one virtual clock.
//!
//! Flow: sim uplinks → push / fetch / edge → ingestion broker → transform
//! (dedup) → QC → triage → core broker → data space sink and consumers.
//! Alarms go to `alarms/<org>/<kind>` on the core broker.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::RngCore;
use serde::Serialize;

use super::config::{producer_id, ConfigError, IngestionTrace, ScenarioConfig};
use super::report::{BrokerReport, ConsumerCounts, OrgCounts, RunReport};
use crate::broker::engine::{Broker, TokenAuth};
use crate::broker::net::{LocalNet, NetEvent};
use crate::broker::packet::QoS;
use crate::broker::session::Message;
use crate::broker::topic::{TopicFilter, TopicPath};
use crate::broker::transport::{LinkProfile, LossyTransport, BROKER};
use crate::dataspace::{AppendOutcome, DataSpace, Selector};
use crate::identity::{issue_token, Access, Action, Grant, Principal, PrincipalStore, Role, SigningKey};
use crate::ingestion::edge::{edge_integrate, EdgeAdapter};
use crate::ingestion::fetch::{fetch_poll, FetchError, FetchSource, MemorySource};
use crate::ingestion::push::{check_record, to_publish, Pusher};
use crate::ingestion::wire::{RawRecord, WireFormat};
use crate::model::{AttributeFlag, DataCategory, Observation};
use crate::monitoring::{evaluate_slos, kpi, labels, render_exposition, Labels, Registry};
use crate::qc::{Alarm, AlarmKind, QcEngine, SensorInfo};
use crate::sim::config::AggregationMode;
use crate::sim::rng::substream;
use crate::sim::world::{SimEvent, World};
use crate::time::{Millis, Timestamp};
use crate::transform::{to_canonical, Deduper, FieldMapping, MappingRegistry, DEDUP_HORIZON};
use crate::triage::triage;

const TRANSFORM: &str = "transform";
const PIPELINE: &str = "pipeline";
const SINK: &str = "dataspace";
const TOKEN_TTL_S: i64 = 400 * 86_400;
/// Post-run drain of broker traffic is bounded by this much virtual time.
const DRAIN_LIMIT: Millis = Millis(6 * 3_600_000);

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    /// JSON-lines event log destination.
    pub event_log: Option<PathBuf>,
    /// Data space journal; in memory when absent.
    pub journal: Option<PathBuf>,
    /// Virtual seconds per wall second. Absent runs as fast as possible.
    pub speedup: Option<f64>,
}

/// Platform-side log entries interleaved with [`SimEvent`]s in the event log.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PipelineEvent {
    Alarm { t: Timestamp, alarm: Alarm },
    IngestRejected { t: Timestamp, org: String, reason: String },
    TransformError { t: Timestamp, org: String, reason: String },
    FetchFailed { t: Timestamp, org: String, reason: String },
    StoreError { t: Timestamp, org: String, reason: String },
    Net { t: Timestamp, broker: String, detail: String },
}

/// Everything a run leaves behind.
#[derive(Debug)]
pub struct Run {
    pub report: RunReport,
    pub store: DataSpace,
    pub registry: Registry,
    /// Expositions taken at each metrics interval and at the end.
    pub expositions: Vec<String>,
    pub key: SigningKey,
    pub principals: PrincipalStore,
    /// Verified access of every configured principal.
    pub accesses: BTreeMap<String, Access>,
    /// Observations each principal received over its subscriptions.
    pub pushed: BTreeMap<String, Vec<Observation>>,
    /// QC state at the end of the run, for re-checking completeness.
    pub qc: QcEngine,
    pub last_qc_tick: Option<Timestamp>,
}

struct OrgRt {
    trace: IngestionTrace,
    format: WireFormat,
    bearer: String,
    fetch: Option<(FetchSource, MemorySource)>,
    counts: OrgCounts,
}

struct ConsumerRt {
    id: String,
    bearer: String,
    filters: Vec<(TopicFilter, QoS)>,
    access: Access,
    counts: ConsumerCounts,
    observations: Vec<Observation>,
}

struct Runner<'a> {
    cfg: &'a ScenarioConfig,
    end: Timestamp,
    world: World,
    ingest: LocalNet,
    core: LocalNet,
    pusher: Pusher,
    mappings: MappingRegistry,
    dedup: Deduper,
    qc: QcEngine,
    store: DataSpace,
    reg: Registry,
    orgs: BTreeMap<String, OrgRt>,
    node_org: BTreeMap<String, String>,
    consumers: Vec<ConsumerRt>,
    log: Option<BufWriter<File>>,
    ota_seen: BTreeMap<String, f64>,
    expositions: Vec<String>,
    last_qc_tick: Option<Timestamp>,
    speedup: Option<f64>,
}

fn platform_access(grants: Vec<Grant>) -> Access {
    Access::new(Principal::new("platform", "platform", &[Role::Operator]), grants)
}

fn internal_link(t: &mut LossyTransport, client: &str) {
    t.set_link(client, BROKER, LinkProfile::lossless());
    t.set_link(BROKER, client, LinkProfile::lossless());
}

fn trace_name(t: IngestionTrace) -> &'static str {
    match t {
        IngestionTrace::Pusher => "pusher",
        IngestionTrace::Fetcher => "fetcher",
        IngestionTrace::Edge => "edge",
    }
}

fn org_labels(org: &str) -> Labels {
    labels([("org", org)])
}

/// Runs `cfg` with `overrides` applied. Deterministic in (config, seed).
pub fn run(cfg: &ScenarioConfig, overrides: &RunOverrides) -> Result<Run, ConfigError> {
    let mut cfg = cfg.clone();
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(d) = overrides.duration_s {
        cfg.duration_s = d;
    }
    let name = if cfg.name.is_empty() { "<scenario>".to_owned() } else { cfg.name.clone() };
    cfg.validate(&name)?;
    let mut r = Runner::new(&cfg, overrides, &name)?;
    r.execute();
    Ok(r.finish(overrides))
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ScenarioConfig, ov: &RunOverrides, name: &str) -> Result<Self, ConfigError> {
        let start = cfg.start_time();
        let end = cfg.end_time();
        let world = World::new(cfg.world_spec()?).map_err(|e| ConfigError::new(name, e.path, e.reason))?;
        let key = run_key(cfg.seed);
        let policy = cfg.broker.retry_policy();
        let net_start = start - Millis::from_secs(1);

        let mut ingest_tx = LossyTransport::new(substream(cfg.seed, "net/ingest").next_u64(), cfg.transport.ingest);
        internal_link(&mut ingest_tx, TRANSFORM);
        let mut ingest = LocalNet::new(Broker::new("ingest", cfg.broker), ingest_tx, net_start);
        let attach = |net: &mut LocalNet, id: &str, grants: Vec<Grant>| {
            net.attach(id, platform_access(grants), policy).expect("fresh client id");
        };
        attach(&mut ingest, TRANSFORM, vec![Grant::topic(Action::Subscribe, "ingest/#")]);
        ingest.subscribe(TRANSFORM, vec![(TopicFilter::new("ingest/#").expect("static"), QoS::ExactlyOnce)]);
        for t in ["pusher", "fetcher", "edge"] {
            attach(&mut ingest, t, vec![Grant::topic(Action::Publish, "ingest/#")]);
        }

        let mut core_tx = LossyTransport::new(substream(cfg.seed, "net/core").next_u64(), cfg.transport.consumers);
        internal_link(&mut core_tx, PIPELINE);
        internal_link(&mut core_tx, SINK);
        let core_broker = Broker::new("core", cfg.broker).with_token_auth(TokenAuth {
            key: key.clone(),
            skew: Millis(0),
        });
        let mut core = LocalNet::new(core_broker, core_tx, net_start);
        attach(&mut core, PIPELINE, vec![Grant::topic(Action::Publish, "#")]);
        attach(
            &mut core,
            SINK,
            vec![
                Grant::topic(Action::Subscribe, "data/#"),
                Grant::topic(Action::Subscribe, "quarantine/#"),
            ],
        );
        core.subscribe(
            SINK,
            vec![
                (TopicFilter::new("data/#").expect("static"), QoS::ExactlyOnce),
                (TopicFilter::new("quarantine/#").expect("static"), QoS::ExactlyOnce),
            ],
        );

        let mut store_principals = PrincipalStore::new();
        for o in &cfg.organizations {
            store_principals.insert(Principal::new(producer_id(&o.org_id), &o.org_id, &[Role::Producer]));
        }
        let mut consumers = Vec::new();
        for p in &cfg.principals {
            store_principals.insert(p.principal());
        }
        for p in &cfg.principals {
            let token = issue_token(&store_principals, &p.principal_id, p.all_grants(), TOKEN_TTL_S, net_start, &key)
                .map_err(|e| ConfigError::new(name, "principals", e.to_string()))?;
            let access = Access::new(p.principal(), p.all_grants());
            core.connect(&p.principal_id, &token.to_bearer(), policy);
            let filters: Vec<(TopicFilter, QoS)> = p
                .subscriptions
                .iter()
                .map(|f| (TopicFilter::new(f.as_str()).expect("validated"), QoS::ExactlyOnce))
                .collect();
            if !filters.is_empty() {
                core.subscribe(&p.principal_id, filters.clone());
            }
            consumers.push(ConsumerRt {
                id: p.principal_id.clone(),
                bearer: token.to_bearer(),
                filters,
                access,
                counts: ConsumerCounts {
                    principal_id: p.principal_id.clone(),
                    ..ConsumerCounts::default()
                },
                observations: Vec::new(),
            });
        }

        let mut mappings = MappingRegistry::new();
        let mut orgs = BTreeMap::new();
        let mut node_org = BTreeMap::new();
        let mut qc = QcEngine::new(cfg.qc);
        let mut reg = Registry::new();
        reg.set_time(net_start);
        for o in &cfg.organizations {
            mappings
                .register_mapping(FieldMapping::for_vocabulary(&o.org_id, o.wire_format))
                .map_err(|e| ConfigError::new(name, format!("organizations.{}", o.org_id), e.to_string()))?;
            let grant = Grant::topic(Action::Ingest, &format!("ingest/{}/#", o.org_id));
            let token = issue_token(&store_principals, &producer_id(&o.org_id), vec![grant], TOKEN_TTL_S, net_start, &key)
                .map_err(|e| ConfigError::new(name, "organizations", e.to_string()))?;
            let fetch = (o.ingestion_trace == IngestionTrace::Fetcher).then(|| {
                (
                    FetchSource::new(&format!("{}-archive", o.org_id), &o.org_id, o.wire_format, o.fetch_poll_s),
                    MemorySource::new(),
                )
            });
            orgs.insert(
                o.org_id.clone(),
                OrgRt {
                    trace: o.ingestion_trace,
                    format: o.wire_format,
                    bearer: token.to_bearer(),
                    fetch,
                    counts: OrgCounts::new(&o.org_id, trace_name(o.ingestion_trace)),
                },
            );
            let ol = org_labels(&o.org_id);
            for m in [
                kpi::INGEST_RECORDS,
                kpi::TRANSFORM_ERRORS,
                kpi::MISSING_ALARMS,
                kpi::DEDUP_DROPS,
                kpi::STORED,
            ] {
                reg.counter_touch(m, &ol).expect("valid metric");
            }
            reg.histogram_register(kpi::DELIVERY_LATENCY, &ol, &kpi::LATENCY_BUCKETS)
                .expect("valid metric");
            for p in &o.platforms {
                node_org.insert(p.gateway.node_id.clone(), o.org_id.clone());
                reg.counter_touch(kpi::OTA_COST, &labels([("org", &o.org_id), ("platform", &p.platform_id)]))
                    .expect("valid metric");
                for n in &p.nodes {
                    node_org.insert(n.node_id.clone(), o.org_id.clone());
                    let interval_s = match n.aggregation.mode {
                        AggregationMode::EventOnly => continue,
                        AggregationMode::Raw => None,
                        AggregationMode::MeanOverWindow => Some(n.aggregation.window_s),
                    };
                    for s in &n.sensors {
                        // first record: first sample, or end of the first window
                        let first_due = start.plus_secs(interval_s.map_or(0.0, |w| w - s.sampling_interval_s));
                        qc.register(
                            SensorInfo {
                                sensor_id: s.sensor_id.clone(),
                                org_id: o.org_id.clone(),
                                platform_id: p.platform_id.clone(),
                                parameter: s.parameter.clone(),
                                unit: s.unit.clone(),
                                location: n.location,
                                expected_interval_s: p.cadence_s,
                                valid_min: s.valid_range.min,
                                valid_max: s.valid_range.max,
                                active_until: Some(end),
                            },
                            first_due,
                        );
                    }
                }
            }
        }
        for (attr, _) in crate::model::QcReport::not_evaluated().attributes() {
            for f in AttributeFlag::ALL {
                reg.counter_touch(kpi::QC_FLAGS, &labels([("attribute", attr), ("flag", f.as_str())]))
                    .expect("valid metric");
            }
        }
        for b in ["ingest", "core"] {
            reg.gauge_set(kpi::BROKER_INFLIGHT, &labels([("broker", b)]), 0.0)
                .expect("valid metric");
        }

        let store = match &ov.journal {
            Some(p) => DataSpace::open(p, cfg.triage.quarantine_flags.clone())
                .map_err(|e| ConfigError::new(&p.display().to_string(), "", e.to_string()))?,
            None => DataSpace::in_memory(cfg.triage.quarantine_flags.clone()),
        };
        let log = match &ov.event_log {
            Some(p) => Some(BufWriter::new(
                File::create(p).map_err(|e| ConfigError::new(&p.display().to_string(), "", e.to_string()))?,
            )),
            None => None,
        };

        let mut r = Runner {
            cfg,
            end,
            world,
            ingest,
            core,
            pusher: Pusher::new(key, Millis(0), QoS::AtLeastOnce),
            mappings,
            dedup: Deduper::new(DEDUP_HORIZON),
            qc,
            store,
            reg,
            orgs,
            node_org,
            consumers,
            log,
            ota_seen: BTreeMap::new(),
            expositions: Vec::new(),
            last_qc_tick: None,
            speedup: ov.speedup.filter(|x| x.is_finite() && *x > 0.0),
        };
        r.ingest.advance(start);
        r.core.advance(start);
        r.refresh_gauges();
        Ok(r)
    }

    fn write_log<T: Serialize>(&mut self, entry: &T) {
        if let Some(w) = &mut self.log {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            // a failing log sink must not change the run
            let _ = writeln!(w, "{line}");
        }
    }

    fn horizon(&self) -> Timestamp {
        let poll = self
            .cfg
            .organizations
            .iter()
            .filter(|o| o.ingestion_trace == IngestionTrace::Fetcher)
            .map(|o| o.fetch_poll_s)
            .fold(0.0, f64::max);
        self.end + self.qc.max_slack() + Millis::from_secs_f64(self.cfg.qc_tick_s + poll) + Millis::from_secs(60)
    }

    fn execute(&mut self) {
        let start = self.cfg.start_time();
        let horizon = self.horizon();
        let tick = Millis::from_secs_f64(self.cfg.qc_tick_s);
        let snap = Millis::from_secs_f64(self.cfg.metrics_interval_s);
        let mut next_tick = start + tick;
        let mut next_snap = start + snap;
        let mut now = start;
        let wall = std::time::Instant::now();
        loop {
            let fetch_due = self
                .orgs
                .values()
                .filter_map(|o| o.fetch.as_ref())
                .map(|(f, _)| f.next_due().unwrap_or(now))
                .min();
            let next = [
                self.world.next_event_time(),
                self.ingest.next_event(),
                self.core.next_event(),
                Some(next_tick),
                fetch_due,
                (next_snap <= self.end).then_some(next_snap),
            ]
            .into_iter()
            .flatten()
            .min();
            match next {
                Some(t) if t <= horizon => now = now.max(t),
                _ => break,
            }
            if let Some(x) = self.speedup {
                let due = std::time::Duration::from_secs_f64((now - start).as_secs_f64().max(0.0) / x);
                if let Some(wait) = due.checked_sub(wall.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
            self.reg.set_time(now);
            self.step_world(now);
            self.ingest.advance(now);
            self.core.advance(now);
            self.route_uplinks(now);
            self.poll_fetchers(now);
            self.drain_ingest();
            if now >= next_tick {
                self.upkeep_consumers();
                self.completeness(now);
                next_tick = next_tick + tick;
            }
            self.drain_core();
            self.net_events();
            if now >= next_snap && next_snap <= self.end {
                self.refresh_gauges();
                self.expositions.push(render_exposition(&self.reg));
                next_snap = next_snap + snap;
            }
        }
        // let brokers settle what is already in flight
        let limit = self.ingest.now().max(self.core.now()) + DRAIN_LIMIT;
        for _ in 0..10_000 {
            self.ingest.run_until_quiescent(limit);
            self.reg.set_time(self.ingest.now());
            let moved = self.drain_ingest();
            self.core.run_until_quiescent(limit);
            self.reg.set_time(self.core.now());
            let stored = self.drain_core();
            self.net_events();
            if moved == 0 && stored == 0 && self.ingest.is_quiescent() && self.core.is_quiescent() {
                break;
            }
            if self.ingest.next_event().is_none() && self.core.next_event().is_none() && moved == 0 && stored == 0 {
                break;
            }
        }
    }

    /// Control packets are not retransmitted, so over a lossy link a consumer
    /// reconnects (taking over its broker session) or resubscribes until
    /// acknowledged.
    fn upkeep_consumers(&mut self) {
        let policy = self.cfg.broker.retry_policy();
        for c in &self.consumers {
            let Some(client) = self.core.client(&c.id) else { continue };
            if client.refused().is_some() {
                continue;
            }
            if !client.is_connected() {
                self.core.broker_mut().detach(&c.id);
                self.core.connect(&c.id, &c.bearer, policy);
                if !c.filters.is_empty() {
                    self.core.subscribe(&c.id, c.filters.clone());
                }
            } else if client.granted().len() < c.filters.len() {
                self.core.subscribe(&c.id, c.filters.clone());
            }
        }
    }

    fn step_world(&mut self, now: Timestamp) {
        let events = self.world.step(now + Millis(1));
        for ev in events {
            self.write_log(&ev);
            if let SimEvent::LowBattery { t, node, remaining_j } = &ev {
                let org = self.node_org.get(node).cloned().unwrap_or_default();
                self.raise(
                    Alarm {
                        kind: AlarmKind::LowBattery,
                        org_id: org,
                        key: node.clone(),
                        at: *t,
                        detail: format!("{remaining_j:.3} J left"),
                    },
                    now,
                );
            }
        }
    }

    fn received(&mut self, org: &str, n: u64) {
        if let Some(o) = self.orgs.get_mut(org) {
            o.counts.records_received += n;
        }
        self.reg
            .counter_inc(kpi::INGEST_RECORDS, &org_labels(org), n as f64)
            .expect("valid metric");
    }

    fn rejected(&mut self, org: &str, now: Timestamp, reason: String) {
        if let Some(o) = self.orgs.get_mut(org) {
            o.counts.push_rejected += 1;
        }
        self.write_log(&PipelineEvent::IngestRejected {
            t: now,
            org: org.to_owned(),
            reason,
        });
    }

    fn publish_raw(&mut self, client: &str, records: Vec<RawRecord>, qos: QoS, now: Timestamp) {
        for rec in records {
            match check_record(&rec.org_id, &rec) {
                Ok(topic) => {
                    let p = to_publish(&rec, topic, qos);
                    self.received(&rec.org_id, 1);
                    self.ingest.publish(client, p.topic, p.payload, p.qos);
                }
                Err(reason) => self.rejected(&rec.org_id, now, reason),
            }
        }
    }

    fn route_uplinks(&mut self, now: Timestamp) {
        for up in self.world.take_uplinks() {
            let Some(org) = self.orgs.get_mut(&up.org_id) else { continue };
            match org.trace {
                IngestionTrace::Pusher => {
                    let bearer = org.bearer.clone();
                    let format = org.format;
                    match self.pusher.push_ingest(&bearer, &up.org_id, format, &up.payload, now) {
                        Ok((receipt, pubs)) => {
                            for rj in receipt.rejected {
                                self.rejected(&up.org_id, now, rj.reason);
                            }
                            self.received(&up.org_id, pubs.len() as u64);
                            for p in pubs {
                                self.ingest.publish("pusher", p.topic, p.payload, up.qos);
                            }
                        }
                        Err(e) => self.rejected(&up.org_id, now, e.to_string()),
                    }
                }
                IngestionTrace::Fetcher => {
                    let fields = org.format.fields(&up.record);
                    if let Some((_, src)) = &mut org.fetch {
                        src.push(up.measured_at, fields);
                    }
                }
                IngestionTrace::Edge => {
                    let adapter = EdgeAdapter {
                        org_id: up.org_id.clone(),
                        platform_id: up.platform_id.clone(),
                        format: org.format,
                        gateway_alive: true,
                    };
                    let recs = edge_integrate(&adapter, std::slice::from_ref(&up.record), now);
                    self.publish_raw("edge", recs, up.qos, now);
                }
            }
        }
    }

    fn poll_fetchers(&mut self, now: Timestamp) {
        let ids: Vec<String> = self
            .orgs
            .iter()
            .filter(|(_, o)| o.fetch.as_ref().is_some_and(|(f, _)| f.is_due(now)))
            .map(|(id, _)| id.clone())
            .collect();
        for id in ids {
            let (src, backend) = self.orgs.get_mut(&id).and_then(|o| o.fetch.as_mut()).expect("listed");
            match fetch_poll(src, backend, now) {
                Ok(recs) => self.publish_raw("fetcher", recs, QoS::AtLeastOnce, now),
                Err(FetchError::NotDue(_)) => {}
                Err(e) => self.write_log(&PipelineEvent::FetchFailed {
                    t: now,
                    org: id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
    }

    fn counts(&mut self, org: &str) -> Option<&mut OrgCounts> {
        self.orgs.get_mut(org).map(|o| &mut o.counts)
    }

    /// Transform, dedup, QC and triage for everything the ingestion broker
    /// delivered. Returns the number of messages handled.
    fn drain_ingest(&mut self) -> usize {
        let delivered = self.ingest.take_delivered(TRANSFORM);
        let n = delivered.len();
        for (t, msg) in delivered {
            self.transform_message(t, msg);
        }
        n
    }

    fn transform_error(&mut self, org: &str, now: Timestamp, reason: String) {
        if let Some(c) = self.counts(org) {
            c.transform_errors += 1;
        }
        self.reg
            .counter_inc(kpi::TRANSFORM_ERRORS, &org_labels(org), 1.0)
            .expect("valid metric");
        self.write_log(&PipelineEvent::TransformError {
            t: now,
            org: org.to_owned(),
            reason,
        });
    }

    fn transform_message(&mut self, now: Timestamp, msg: Message) {
        let org = msg.topic.level(1).unwrap_or_default().to_owned();
        let Some(format) = self.orgs.get(&org).map(|o| o.format) else { return };
        let records = match format.parse(&org, &msg.payload, now) {
            Ok(r) => r,
            Err(e) => {
                if let Some(c) = self.counts(&org) {
                    c.records_ingested += 1;
                }
                self.transform_error(&org, now, e.to_string());
                return;
            }
        };
        for rec in records {
            if let Some(c) = self.counts(&org) {
                c.records_ingested += 1;
            }
            let obs = match to_canonical(&rec, &self.mappings) {
                Ok(o) => o,
                Err(e) => {
                    self.transform_error(&org, now, e.to_string());
                    continue;
                }
            };
            if !self.dedup.admit(&obs) {
                self.dedup_drop(&org);
                continue;
            }
            let radius = self.cfg.qc.consistency.neighbor_radius_m;
            let neighbors: Vec<f64> = self
                .store
                .latest(&obs.parameter, &obs.location, radius)
                .into_iter()
                .filter(|n| n.sensor_id != obs.sensor_id)
                .filter_map(|n| n.value)
                .collect();
            let (obs, alarms) = self.qc.process(obs, now, &neighbors);
            self.count_flags(&obs);
            for a in alarms {
                self.raise(a, now);
            }
            self.route(obs, now);
        }
    }

    fn dedup_drop(&mut self, org: &str) {
        if let Some(c) = self.counts(org) {
            c.dedup_drops += 1;
        }
        self.reg
            .counter_inc(kpi::DEDUP_DROPS, &org_labels(org), 1.0)
            .expect("valid metric");
    }

    fn count_flags(&mut self, obs: &Observation) {
        for (attr, flag) in obs.qc.attributes() {
            self.reg
                .counter_inc(kpi::QC_FLAGS, &labels([("attribute", attr), ("flag", flag.as_str())]), 1.0)
                .expect("valid metric");
        }
    }

    fn route(&mut self, obs: Observation, now: Timestamp) {
        let (obs, topic) = triage(obs, &self.cfg.triage, now);
        let payload = serde_json::to_vec(&obs).expect("observation serializes");
        self.core.publish(PIPELINE, topic, payload, QoS::ExactlyOnce);
    }

    fn raise(&mut self, alarm: Alarm, now: Timestamp) {
        let org = alarm.org_id.clone();
        if let Some(c) = self.counts(&org) {
            *c.alarms.entry(alarm.kind.slug().to_owned()).or_default() += 1;
        }
        if !org.is_empty() {
            self.reg
                .counter_inc(kpi::ALARMS, &labels([("kind", alarm.kind.slug()), ("org", &org)]), 1.0)
                .expect("valid metric");
            if alarm.kind == AlarmKind::MissingData {
                self.reg
                    .counter_inc(kpi::MISSING_ALARMS, &org_labels(&org), 1.0)
                    .expect("valid metric");
            }
            let payload = serde_json::to_vec(&alarm).expect("alarm serializes");
            self.core.publish(PIPELINE, alarm.topic(), payload, QoS::AtLeastOnce);
        }
        self.write_log(&PipelineEvent::Alarm { t: now, alarm });
    }

    fn completeness(&mut self, now: Timestamp) {
        self.last_qc_tick = Some(now);
        for (obs, alarm) in self.qc.tick(now) {
            if let Some(c) = self.counts(&obs.org_id) {
                c.missing_synthesized += 1;
            }
            self.count_flags(&obs);
            self.raise(alarm, now);
            self.route(obs, now);
        }
    }

    /// Stores what reached the sink and tallies consumer deliveries.
    fn drain_core(&mut self) -> usize {
        let delivered = self.core.take_delivered(SINK);
        let n = delivered.len();
        for (t, msg) in delivered {
            let Ok(obs) = serde_json::from_slice::<Observation>(&msg.payload) else { continue };
            let org = obs.org_id.clone();
            let missing = obs.value.is_none();
            let quarantined = msg.topic.level(0) == Some("quarantine");
            let measured_at = obs.measured_at;
            match self.store.append(obs) {
                Ok(AppendOutcome::Stored | AppendOutcome::Replaced) => {
                    if missing {
                        if let Some(c) = self.counts(&org) {
                            c.missing_stored += 1;
                        }
                    } else {
                        if let Some(c) = self.counts(&org) {
                            c.observations_stored += 1;
                            if quarantined {
                                c.quarantined += 1;
                            }
                        }
                        let ol = org_labels(&org);
                        self.reg.counter_inc(kpi::STORED, &ol, 1.0).expect("valid metric");
                        self.reg
                            .histogram_observe(
                                kpi::DELIVERY_LATENCY,
                                &ol,
                                &kpi::LATENCY_BUCKETS,
                                (t - measured_at).as_secs_f64().max(0.0),
                            )
                            .expect("valid metric");
                    }
                }
                Ok(AppendOutcome::Ignored) => {
                    if !missing {
                        self.dedup_drop(&org);
                    }
                }
                Err(e) => self.write_log(&PipelineEvent::StoreError {
                    t,
                    org,
                    reason: e.to_string(),
                }),
            }
        }
        for i in 0..self.consumers.len() {
            let id = self.consumers[i].id.clone();
            for (_, msg) in self.core.take_delivered(&id) {
                let c = &mut self.consumers[i];
                let bucket = match msg.topic.level(0) {
                    Some("data") => msg.topic.level(1).unwrap_or("data").to_owned(),
                    Some(other) => other.to_owned(),
                    None => continue,
                };
                *c.counts.pushed.entry(bucket).or_default() += 1;
                if msg.topic.level(0) == Some("data") {
                    if let Ok(obs) = serde_json::from_slice::<Observation>(&msg.payload) {
                        c.observations.push(obs);
                    }
                }
            }
        }
        n
    }

    fn net_events(&mut self) {
        let evs: Vec<(&str, NetEvent)> = self
            .ingest
            .take_events()
            .into_iter()
            .map(|e| ("ingest", e))
            .chain(self.core.take_events().into_iter().map(|e| ("core", e)))
            .collect();
        for (broker, e) in evs {
            let t = if broker == "ingest" { self.ingest.now() } else { self.core.now() };
            if let NetEvent::SessionFailed(f) = &e {
                let org = TopicPath::new(f.topic.as_str())
                    .ok()
                    .and_then(|p| p.level(1).map(str::to_owned))
                    .filter(|o| self.orgs.contains_key(o))
                    .unwrap_or_default();
                self.raise(
                    Alarm {
                        kind: AlarmKind::SessionFailed,
                        org_id: org,
                        key: f.client_id.clone(),
                        at: f.at,
                        detail: format!("{} packet {} on {}", f.broker, f.packet_id, f.topic),
                    },
                    t,
                );
            }
            self.write_log(&PipelineEvent::Net {
                t,
                broker: broker.to_owned(),
                detail: format!("{e:?}"),
            });
        }
    }

    fn refresh_gauges(&mut self) {
        self.reg
            .gauge_set(kpi::BROKER_INFLIGHT, &labels([("broker", "ingest")]), self.ingest.inflight() as f64)
            .expect("valid metric");
        self.reg
            .gauge_set(kpi::BROKER_INFLIGHT, &labels([("broker", "core")]), self.core.inflight() as f64)
            .expect("valid metric");
        for n in self.world.energy() {
            self.reg
                .gauge_set(kpi::NODE_BATTERY, &labels([("node", &n.node_id), ("org", &n.org_id)]), n.remaining_j)
                .expect("valid metric");
        }
        for g in self.world.gateway_costs() {
            let seen = self.ota_seen.entry(g.gateway_id.clone()).or_insert(0.0);
            let delta = g.ota_cost - *seen;
            if delta > 0.0 {
                *seen = g.ota_cost;
                self.reg
                    .counter_inc(kpi::OTA_COST, &labels([("org", &g.org_id), ("platform", &g.platform_id)]), delta)
                    .expect("valid metric");
            }
        }
    }

    fn finish(mut self, ov: &RunOverrides) -> Run {
        self.refresh_gauges();
        let end_at = self.ingest.now().max(self.core.now()).max(self.world.now());
        self.reg.set_time(end_at);
        let metrics = render_exposition(&self.reg);
        self.expositions.push(metrics.clone());
        let slo_breaches = evaluate_slos(&self.reg, &self.cfg.slos, end_at);
        if let Some(w) = &mut self.log {
            let _ = w.flush();
        }

        let mut orgs = Vec::new();
        for (id, o) in &self.orgs {
            let mut c = o.counts.clone();
            if let Some(s) = self.world.org_stats(id) {
                c.samples = s.samples;
                c.suppressed = s.suppressed;
                c.frames_sent = s.frames_sent;
                c.frames_lost = s.frames_lost;
                c.readings_delivered = s.delivered_readings;
                c.readings_lost = s.lost_readings;
            }
            c.readings_buffered = self.world.buffered_readings(id);
            orgs.push(c);
        }

        let mut accesses = BTreeMap::new();
        let mut pushed = BTreeMap::new();
        let mut consumers = Vec::new();
        for mut c in self.consumers {
            if let Ok(rows) = self.store.query(&Selector::all(), &c.access) {
                for r in rows {
                    *c.counts.pulled.entry(r.category.slug().to_owned()).or_default() += 1;
                }
            }
            consumers.push(c.counts);
            pushed.insert(c.id.clone(), c.observations);
            accesses.insert(c.id, c.access);
        }

        let mut principals = PrincipalStore::new();
        for p in &self.cfg.principals {
            principals.insert(p.principal());
        }

        let report = RunReport {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            start: self.cfg.start_time(),
            end: self.end,
            duration_s: self.cfg.duration_s,
            orgs,
            energy: self.world.energy(),
            ota: self.world.gateway_costs(),
            consumers,
            brokers: BrokerReport {
                ingest: self.ingest.broker().stats(),
                core: self.core.broker().stats(),
            },
            slo_breaches,
            metrics,
            event_log: ov.event_log.as_ref().map(|p| p.display().to_string()),
        };
        Run {
            report,
            store: self.store,
            registry: self.reg,
            expositions: self.expositions,
            key: run_key(self.cfg.seed),
            principals,
            accesses,
            pushed,
            qc: self.qc,
            last_qc_tick: self.last_qc_tick,
        }
    }
}

/// Token signing key of a run, derived from its seed.
pub fn run_key(seed: u64) -> SigningKey {
    SigningKey::new(format!("scenario-{seed}"))
}

impl Run {
    /// Categories present in the data space.
    pub fn stored_categories(&self) -> Vec<DataCategory> {
        DataCategory::ALL
            .into_iter()
            .filter(|c| self.store.iter().any(|o| o.category == *c))
            .collect()
    }
}
