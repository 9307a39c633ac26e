//! Service-mode processing stage: push ingestion, transform, QC, triage and
//! the data space, driven by the wall clock. Owned by one task.

use std::path::Path;

use anyhow::Context;
use iout_core::broker::{Message, QoS, TopicPath};
use iout_core::dataspace::{AppendOutcome, DataSpace, Selector};
use iout_core::identity::{SigningKey, Token};
use iout_core::ingestion::push::{IngestError, IngestPublish, IngestReceipt, Pusher};
use iout_core::monitoring::{kpi, labels, render_exposition, Registry};
use iout_core::qc::{Alarm, QcEngine, SensorInfo};
use iout_core::scenario::ScenarioConfig;
use iout_core::transform::{to_canonical, Deduper, FieldMapping, MappingRegistry, DEDUP_HORIZON};
use iout_core::triage::triage;
use iout_core::{Millis, Observation, Timestamp};

/// A message for the broker, published under the pipeline's identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub topic: TopicPath,
    pub payload: Vec<u8>,
    pub qos: QoS,
}

#[derive(Debug, PartialEq)]
pub enum QueryFailure {
    Unauthorized(String),
    Invalid(String),
}

pub struct Pipeline {
    cfg: ScenarioConfig,
    key: SigningKey,
    skew: Millis,
    pusher: Pusher,
    mappings: MappingRegistry,
    dedup: Deduper,
    qc: QcEngine,
    store: DataSpace,
    reg: Registry,
}

impl Pipeline {
    pub fn new(cfg: &ScenarioConfig, key: SigningKey, skew: Millis, journal: Option<&Path>, now: Timestamp) -> anyhow::Result<Self> {
        let mut mappings = MappingRegistry::new();
        let mut qc = QcEngine::new(cfg.qc);
        let mut reg = Registry::new();
        reg.set_time(now);
        for o in &cfg.organizations {
            mappings
                .register_mapping(FieldMapping::for_vocabulary(&o.org_id, o.wire_format))
                .map_err(|e| anyhow::anyhow!("organization {}: {e}", o.org_id))?;
            let ol = labels([("org", &o.org_id)]);
            for m in [kpi::INGEST_RECORDS, kpi::TRANSFORM_ERRORS, kpi::MISSING_ALARMS, kpi::DEDUP_DROPS, kpi::STORED] {
                reg.counter_touch(m, &ol)?;
            }
            for p in &o.platforms {
                for n in &p.nodes {
                    for s in &n.sensors {
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
                                active_until: None,
                            },
                            now.plus_secs(p.cadence_s),
                        );
                    }
                }
            }
        }
        let flags = cfg.triage.quarantine_flags.clone();
        let store = match journal {
            Some(p) => DataSpace::open(p, flags).with_context(|| format!("opening journal {}", p.display()))?,
            None => DataSpace::in_memory(flags),
        };
        Ok(Pipeline {
            cfg: cfg.clone(),
            pusher: Pusher::new(key.clone(), skew, QoS::AtLeastOnce),
            key,
            skew,
            mappings,
            dedup: Deduper::new(DEDUP_HORIZON),
            qc,
            store,
            reg,
        })
    }

    #[cfg(test)]
    pub fn store(&self) -> &DataSpace {
        &self.store
    }

    pub fn push(
        &mut self,
        org: &str,
        bearer: &str,
        body: &[u8],
        now: Timestamp,
    ) -> Result<(IngestReceipt, Vec<IngestPublish>), IngestError> {
        let format = self
            .cfg
            .org(org)
            .map(|o| o.wire_format)
            .ok_or_else(|| IngestError::NotAuthorized(format!("unknown organization {org}")))?;
        let (receipt, publishes) = self.pusher.push_ingest(bearer, org, format, body, now)?;
        self.reg.set_time(now);
        self.count(kpi::INGEST_RECORDS, org, receipt.accepted as f64);
        Ok((receipt, publishes))
    }

    /// One ingestion-broker message through transform, QC and triage.
    pub fn transform(&mut self, msg: &Message, now: Timestamp) -> Vec<Outbound> {
        self.reg.set_time(now);
        let mut out = Vec::new();
        let org = msg.topic.level(1).unwrap_or_default().to_owned();
        let Some(format) = self.cfg.org(&org).map(|o| o.wire_format) else {
            return out;
        };
        let records = match format.parse(&org, &msg.payload, now) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("transform: {org}: {e}");
                self.count(kpi::TRANSFORM_ERRORS, &org, 1.0);
                return out;
            }
        };
        for rec in records {
            let obs = match to_canonical(&rec, &self.mappings) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("transform: {org}: {e}");
                    self.count(kpi::TRANSFORM_ERRORS, &org, 1.0);
                    continue;
                }
            };
            if !self.dedup.admit(&obs) {
                self.count(kpi::DEDUP_DROPS, &org, 1.0);
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
            for a in alarms {
                self.raise(a, &mut out);
            }
            self.route(obs, now, &mut out);
        }
        out
    }

    /// Completeness check; placeholders are stored and published like readings.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Outbound> {
        self.reg.set_time(now);
        let mut out = Vec::new();
        for (obs, alarm) in self.qc.tick(now) {
            self.raise(alarm, &mut out);
            self.route(obs, now, &mut out);
        }
        out
    }

    pub fn query(&self, bearer: &str, sel: &Selector, now: Timestamp) -> Result<Vec<Observation>, QueryFailure> {
        let access = Token::from_bearer(bearer)
            .and_then(|t| t.verify_access(now, &self.key, self.skew))
            .map_err(|e| QueryFailure::Unauthorized(e.to_string()))?;
        self.store.query(sel, &access).map_err(|e| match e {
            iout_core::dataspace::QueryError::NotAuthorized(c) => QueryFailure::Unauthorized(format!("not authorized for {c}")),
            other => QueryFailure::Invalid(other.to_string()),
        })
    }

    pub fn metrics(&mut self, now: Timestamp) -> String {
        self.reg.set_time(now);
        render_exposition(&self.reg)
    }

    fn count(&mut self, name: &str, org: &str, delta: f64) {
        self.reg.counter_inc(name, &labels([("org", org)]), delta).expect("valid metric");
    }

    fn raise(&mut self, alarm: Alarm, out: &mut Vec<Outbound>) {
        if alarm.org_id.is_empty() {
            return;
        }
        let al = labels([("kind", alarm.kind.slug()), ("org", &alarm.org_id)]);
        self.reg.counter_inc(kpi::ALARMS, &al, 1.0).expect("valid metric");
        if alarm.kind == iout_core::qc::AlarmKind::MissingData {
            self.count(kpi::MISSING_ALARMS, &alarm.org_id.clone(), 1.0);
        }
        out.push(Outbound {
            topic: alarm.topic(),
            payload: serde_json::to_vec(&alarm).expect("alarm serializes"),
            qos: QoS::AtLeastOnce,
        });
    }

    fn route(&mut self, obs: Observation, now: Timestamp, out: &mut Vec<Outbound>) {
        for (attr, flag) in obs.qc.attributes() {
            self.reg
                .counter_inc(kpi::QC_FLAGS, &labels([("attribute", attr), ("flag", flag.as_str())]), 1.0)
                .expect("valid metric");
        }
        let (obs, topic) = triage(obs, &self.cfg.triage, now);
        let payload = serde_json::to_vec(&obs).expect("observation serializes");
        let org = obs.org_id.clone();
        let present = obs.value.is_some();
        let measured_at = obs.measured_at;
        match self.store.append(obs) {
            Ok(AppendOutcome::Stored | AppendOutcome::Replaced) if present => {
                self.count(kpi::STORED, &org, 1.0);
                self.reg
                    .histogram_observe(
                        kpi::DELIVERY_LATENCY,
                        &labels([("org", &org)]),
                        &kpi::LATENCY_BUCKETS,
                        (now - measured_at).as_secs_f64().max(0.0),
                    )
                    .expect("valid metric");
            }
            Ok(AppendOutcome::Ignored) if present => self.count(kpi::DEDUP_DROPS, &org, 1.0),
            Ok(_) => {}
            Err(e) => eprintln!("store: {org}: {e}"),
        }
        out.push(Outbound {
            topic,
            payload,
            qos: QoS::ExactlyOnce,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use iout_core::identity::{issue_token, PrincipalStore};
    use iout_core::scenario::load_scenario;

    fn org7() -> ScenarioConfig {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/org7.json");
        load_scenario(&p).unwrap()
    }

    fn bearer(cfg: &ScenarioConfig, id: &str, key: &SigningKey, now: Timestamp) -> String {
        let mut store = PrincipalStore::new();
        let dir = cfg.directory();
        for (p, _) in &dir {
            store.insert(p.clone());
        }
        let grants = dir.iter().find(|(p, _)| p.principal_id == id).unwrap().1.clone();
        issue_token(&store, id, grants, 3600, now, key).unwrap().to_bearer()
    }

    fn body(cfg: &ScenarioConfig, t: &str, v: &str) -> Vec<u8> {
        let o = &cfg.organizations[0];
        let s = &o.platforms[0].nodes[0].sensors[0];
        let at = o.platforms[0].nodes[0].location;
        let rec = iout_core::ingestion::wire::SourceRecord {
            platform_id: o.platforms[0].platform_id.clone(),
            sensor_id: s.sensor_id.clone(),
            parameter: s.parameter.clone(),
            unit: s.unit.clone(),
            measured_at: Timestamp::parse_rfc3339(t).unwrap(),
            value: v.into(),
            lat: at.lat,
            lon: at.lon,
            depth_m: at.depth_m,
        };
        o.wire_format.encode(&[o.wire_format.fields(&rec)])
    }

    #[test]
    fn pushed_reading_is_stored_and_published() {
        let cfg = org7();
        let key = SigningKey::new("t");
        let now = Timestamp::parse_rfc3339("2024-06-01T00:00:00Z").unwrap();
        let mut p = Pipeline::new(&cfg, key.clone(), Millis(0), None, now).unwrap();
        let org = cfg.organizations[0].org_id.clone();
        let tok = bearer(&cfg, &iout_core::scenario::producer_id(&org), &key, now);
        let (receipt, pubs) = p.push(&org, &tok, &body(&cfg, "2024-06-01T00:00:00Z", "10.5"), now).unwrap();
        assert_eq!(receipt.accepted, 1);
        assert_eq!(pubs.len(), 1);
        let msg = Message {
            topic: pubs[0].topic.clone(),
            payload: pubs[0].payload.clone(),
            qos: pubs[0].qos,
        };
        let out = p.transform(&msg, now);
        assert!(out.iter().any(|o| o.qos == QoS::ExactlyOnce));
        assert_eq!(p.store().count_present(), 1);
        // the same reading again is a duplicate
        assert!(p.transform(&msg, now).is_empty());
        assert_eq!(p.store().count_present(), 1);
        assert!(p.metrics(now).contains("observations_stored_total{org=\"org7\"} 1"));
    }

    #[test]
    fn push_for_another_org_is_refused() {
        let cfg = org7();
        let key = SigningKey::new("t");
        let now = Timestamp(0);
        let mut p = Pipeline::new(&cfg, key.clone(), Millis(0), None, now).unwrap();
        let tok = bearer(&cfg, &iout_core::scenario::producer_id("org7"), &key, now);
        assert!(matches!(p.push("org8", &tok, b"{}", now), Err(IngestError::NotAuthorized(_))));
        assert!(matches!(p.push("org7", "garbage", b"{}", now), Err(IngestError::NotAuthorized(_))));
    }

    #[test]
    fn silent_sensors_get_placeholders() {
        let cfg = org7();
        let now = Timestamp(0);
        let mut p = Pipeline::new(&cfg, SigningKey::new("t"), Millis(0), None, now).unwrap();
        let cadence = cfg.organizations[0].platforms[0].cadence_s;
        let out = p.tick(now.plus_secs(cadence * 4.0));
        assert!(out.iter().any(|o| o.topic.level(0) == Some("alarms")));
        assert!(p.store().count_missing() > 0);
    }

    #[test]
    fn query_needs_a_valid_token() {
        let cfg = org7();
        let p = Pipeline::new(&cfg, SigningKey::new("t"), Millis(0), None, Timestamp(0)).unwrap();
        assert!(matches!(
            p.query("nope", &Selector::all(), Timestamp(0)),
            Err(QueryFailure::Unauthorized(_))
        ));
    }
}
