//! Discrete-event engine for the producer side: sampling, local processing,
//! in-network frames, gateway bridging and carrier uplinks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::channel::{transmit, CostLedger, NodeDead, TransmitResult};
use super::config::{
    AggregationMode, ChannelKind, FaultKind, GatewayDelivery, NodeRole, NodeSpec, SimConfigError, WorldSpec,
};
use super::energy::{joules_to_nj, nj_to_joules, Battery, EnergyUse};
use super::frame::{decode_frame, encode_frame, scale_value, scaled_to_decimal};
use super::gateway::{gateway_bridge, Bridged, GatewayRecord, GatewayState};
use super::process::{local_process, OutRecord, ProcessState};
use super::rng::substream;
use super::signal::{sample, RawReading, TrueFlag};
use crate::broker::packet::QoS;
use crate::broker::topic::TopicPath;
use crate::ingestion::wire::SourceRecord;
use crate::time::{Millis, Timestamp};

/// Most records packed into one in-network frame.
pub const MAX_FRAME_RECORDS: usize = 16;
/// Fraction of initial charge below which a low-battery event fires.
pub const LOW_BATTERY_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Sample {
        t: Timestamp,
        node: String,
        sensor: String,
        value: f64,
        true_flag: TrueFlag,
    },
    Suppressed {
        t: Timestamp,
        node: String,
        readings: u32,
    },
    FrameSent {
        t: Timestamp,
        node: String,
        channel: ChannelKind,
        bytes: usize,
        records: usize,
        result: TransmitResult,
    },
    FrameReceived {
        t: Timestamp,
        gateway: String,
        from: String,
        records: usize,
    },
    FrameDropped {
        t: Timestamp,
        gateway: String,
        from: String,
        readings: u64,
        reason: String,
    },
    Overflow {
        t: Timestamp,
        node: String,
        readings: u64,
    },
    Uplink {
        t: Timestamp,
        org: String,
        platform: String,
        topic: String,
        bytes: usize,
        delivery: GatewayDelivery,
    },
    UplinkLost {
        t: Timestamp,
        org: String,
        platform: String,
        bytes: usize,
    },
    Fault {
        t: Timestamp,
        target: String,
        kind: FaultKind,
        active: bool,
    },
    LowBattery {
        t: Timestamp,
        node: String,
        remaining_j: f64,
    },
    NodeDied {
        t: Timestamp,
        node: String,
    },
}

/// A batch handed from a gateway to the organization's platform side.
#[derive(Debug, Clone, PartialEq)]
pub struct Uplink {
    pub org_id: String,
    pub platform_id: String,
    pub delivery: GatewayDelivery,
    pub topic: TopicPath,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub at: Timestamp,
    pub measured_at: Timestamp,
    pub covers: u32,
    /// The logical record the payload encodes.
    pub record: SourceRecord,
}

/// Per-organization counters; reading counts are in sensor readings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrgSimStats {
    pub samples: u64,
    pub suppressed: u64,
    pub frames_sent: u64,
    pub frames_lost: u64,
    pub network_bytes: u64,
    pub ota_sent: u64,
    pub ota_lost: u64,
    pub lost_readings: u64,
    pub delivered_readings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEnergy {
    pub node_id: String,
    pub org_id: String,
    pub role: NodeRole,
    pub initial_j: f64,
    pub remaining_j: f64,
    pub debited_j: BTreeMap<EnergyUse, f64>,
    /// initial − remaining equals the sum of debits, in integer nano-joules.
    pub balanced: bool,
    pub alive: bool,
    pub died_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayCost {
    pub gateway_id: String,
    pub org_id: String,
    pub platform_id: String,
    pub ota_bytes: u64,
    pub ota_cost: f64,
}

#[derive(Debug)]
enum Ev {
    Sample { node: usize, sensor: usize },
    NodeFault { node: usize, fault: usize, start: bool },
    SensorFault { node: usize, sensor: usize, fault: usize, start: bool },
    FrameArrival { from: usize, gateway: usize, frame: Vec<u8>, covers: u64 },
    NodeRetry { node: usize },
    OtaArrival { gateway: usize, bridged: Bridged },
    GatewayRetry { gateway: usize },
}

impl Ev {
    fn rank(&self) -> u8 {
        match self {
            Ev::NodeFault { start: false, .. } | Ev::SensorFault { start: false, .. } => 0,
            Ev::NodeFault { start: true, .. } | Ev::SensorFault { start: true, .. } => 1,
            Ev::FrameArrival { .. } | Ev::OtaArrival { .. } => 2,
            Ev::Sample { .. } => 3,
            Ev::NodeRetry { .. } | Ev::GatewayRetry { .. } => 4,
        }
    }
}

#[derive(Debug)]
struct NodeRt {
    spec: NodeSpec,
    org: usize,
    gateway: usize,
    battery: Battery,
    exhausted: bool,
    died_at: Option<Timestamp>,
    dead_fault: bool,
    link_down: bool,
    low_reported: bool,
    sensor_rngs: Vec<ChaCha8Rng>,
    link_rng: ChaCha8Rng,
    proc: Vec<ProcessState>,
    windows: Vec<Vec<RawReading>>,
    outbox: VecDeque<OutRecord>,
    retry_pending: bool,
    /// Arrivals on one link keep their send order.
    last_arrival: Timestamp,
    ledger: CostLedger,
}

impl NodeRt {
    fn alive(&self) -> bool {
        !self.exhausted && !self.dead_fault
    }

    fn outbox_covers(&self) -> u64 {
        self.outbox.iter().map(|r| u64::from(r.count)).sum()
    }

    fn window_readings(&self) -> u64 {
        self.windows.iter().map(|w| w.len() as u64).sum()
    }
}

#[derive(Debug)]
struct GatewayRt {
    node: usize,
    org: usize,
    delivery: GatewayDelivery,
    retransmit: Millis,
    state: GatewayState,
    retry_pending: bool,
    last_arrival: Timestamp,
}

#[derive(Debug)]
pub struct World {
    spec: WorldSpec,
    now: Timestamp,
    queue: BinaryHeap<Reverse<(Timestamp, u8, u64)>>,
    pending: BTreeMap<u64, Ev>,
    seq: u64,
    nodes: Vec<NodeRt>,
    gateways: Vec<GatewayRt>,
    stats: Vec<OrgSimStats>,
    in_flight: Vec<u64>,
    uplinks: Vec<Uplink>,
    events: Vec<SimEvent>,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<World, SimConfigError> {
        spec.validate()?;
        let mut w = World {
            now: spec.start,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            seq: 0,
            nodes: Vec::new(),
            gateways: Vec::new(),
            stats: vec![OrgSimStats::default(); spec.orgs.len()],
            in_flight: vec![0; spec.orgs.len()],
            uplinks: Vec::new(),
            events: Vec::new(),
            spec,
        };
        let seed = w.spec.seed;
        let orgs = w.spec.orgs.clone();
        for (oi, org) in orgs.iter().enumerate() {
            for p in &org.platforms {
                let gi = w.gateways.len();
                let gw_node = w.nodes.len();
                w.nodes.push(Self::node_rt(seed, &p.gateway, oi, gi));
                w.gateways.push(GatewayRt {
                    node: gw_node,
                    org: oi,
                    delivery: org.delivery,
                    retransmit: Millis::from_secs_f64(p.retransmit_timeout_s),
                    state: GatewayState::new(
                        &org.org_id,
                        &p.platform_id,
                        org.wire_format,
                        p.qos,
                        p.gateway.buffer_capacity,
                    ),
                    retry_pending: false,
                    last_arrival: Timestamp(i64::MIN),
                });
                for n in &p.nodes {
                    w.nodes.push(Self::node_rt(seed, n, oi, gi));
                }
            }
        }
        for ni in 0..w.nodes.len() {
            let spec = w.nodes[ni].spec.clone();
            for (fi, f) in spec.faults.iter().enumerate() {
                w.schedule(f.start, Ev::NodeFault { node: ni, fault: fi, start: true });
                w.schedule(f.end, Ev::NodeFault { node: ni, fault: fi, start: false });
            }
            for (si, s) in spec.sensors.iter().enumerate() {
                for (fi, f) in s.fault_plan.iter().enumerate() {
                    w.schedule(f.start, Ev::SensorFault { node: ni, sensor: si, fault: fi, start: true });
                    w.schedule(f.end, Ev::SensorFault { node: ni, sensor: si, fault: fi, start: false });
                }
                let start = w.spec.start;
                if w.sampling_open(start) {
                    w.schedule(start, Ev::Sample { node: ni, sensor: si });
                }
            }
        }
        Ok(w)
    }

    fn node_rt(seed: u64, spec: &NodeSpec, org: usize, gateway: usize) -> NodeRt {
        NodeRt {
            battery: Battery::new(spec.battery_j),
            exhausted: false,
            died_at: None,
            dead_fault: false,
            link_down: false,
            low_reported: false,
            sensor_rngs: spec
                .sensors
                .iter()
                .map(|s| substream(seed, &format!("sensor/{}", s.sensor_id)))
                .collect(),
            link_rng: substream(seed, &format!("link/{}", spec.node_id)),
            proc: vec![ProcessState::default(); spec.sensors.len()],
            windows: vec![Vec::new(); spec.sensors.len()],
            outbox: VecDeque::new(),
            retry_pending: false,
            last_arrival: Timestamp(i64::MIN),
            ledger: CostLedger::default(),
            org,
            gateway,
            spec: spec.clone(),
        }
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    fn sampling_open(&self, t: Timestamp) -> bool {
        self.spec.sampling_end.map_or(true, |end| t < end)
    }

    fn schedule(&mut self, t: Timestamp, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse((t, ev.rank(), self.seq)));
        self.pending.insert(self.seq, ev);
    }

    pub fn next_event_time(&self) -> Option<Timestamp> {
        self.queue.peek().map(|Reverse((t, _, _))| *t)
    }

    /// Processes every event strictly before `until`, in (time, kind,
    /// insertion) order, and returns the resulting log entries.
    pub fn step(&mut self, until: Timestamp) -> Vec<SimEvent> {
        while let Some(Reverse((t, _, seq))) = self.queue.peek().copied() {
            if t >= until {
                break;
            }
            self.queue.pop();
            self.now = t;
            let ev = self.pending.remove(&seq).expect("queued event present");
            self.handle(ev);
        }
        self.now = self.now.max(until);
        std::mem::take(&mut self.events)
    }

    pub fn take_uplinks(&mut self) -> Vec<Uplink> {
        std::mem::take(&mut self.uplinks)
    }

    pub fn org_ids(&self) -> impl Iterator<Item = &str> {
        self.spec.orgs.iter().map(|o| o.org_id.as_str())
    }

    pub fn org_stats(&self, org_id: &str) -> Option<&OrgSimStats> {
        let i = self.spec.orgs.iter().position(|o| o.org_id == org_id)?;
        Some(&self.stats[i])
    }

    /// Readings not yet delivered nor lost: partial windows, node outboxes,
    /// frames in the air, gateway buffers.
    pub fn buffered_readings(&self, org_id: &str) -> u64 {
        let Some(oi) = self.spec.orgs.iter().position(|o| o.org_id == org_id) else {
            return 0;
        };
        let nodes: u64 = self
            .nodes
            .iter()
            .filter(|n| n.org == oi)
            .map(|n| n.outbox_covers() + n.window_readings())
            .sum();
        let gateways: u64 = self
            .gateways
            .iter()
            .filter(|g| g.org == oi)
            .map(|g| g.state.buffered_covers())
            .sum();
        nodes + gateways + self.in_flight[oi]
    }

    pub fn energy(&self) -> Vec<NodeEnergy> {
        self.nodes
            .iter()
            .map(|n| NodeEnergy {
                node_id: n.spec.node_id.clone(),
                org_id: self.spec.orgs[n.org].org_id.clone(),
                role: n.spec.role,
                initial_j: nj_to_joules(n.battery.initial_nj),
                remaining_j: n.battery.remaining_j(),
                debited_j: n
                    .battery
                    .debited_nj
                    .iter()
                    .map(|(k, v)| (*k, nj_to_joules(*v)))
                    .collect(),
                balanced: n.battery.initial_nj - n.battery.remaining_nj == n.battery.total_debited_nj(),
                alive: n.alive(),
                died_at: n.died_at,
            })
            .collect()
    }

    pub fn battery(&self, node_id: &str) -> Option<&Battery> {
        self.nodes
            .iter()
            .find(|n| n.spec.node_id == node_id)
            .map(|n| &n.battery)
    }

    pub fn gateway_costs(&self) -> Vec<GatewayCost> {
        self.gateways
            .iter()
            .map(|g| {
                let n = &self.nodes[g.node];
                GatewayCost {
                    gateway_id: n.spec.node_id.clone(),
                    org_id: g.state.org_id.clone(),
                    platform_id: g.state.platform_id.clone(),
                    ota_bytes: n.ledger.bytes,
                    ota_cost: n.ledger.cost,
                }
            })
            .collect()
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Sample { node, sensor } => self.on_sample(node, sensor),
            Ev::NodeFault { node, fault, start } => self.on_node_fault(node, fault, start),
            Ev::SensorFault { node, sensor, fault, start } => {
                let s = &self.nodes[node].spec.sensors[sensor];
                self.events.push(SimEvent::Fault {
                    t: self.now,
                    target: s.sensor_id.clone(),
                    kind: s.fault_plan[fault].kind,
                    active: start,
                });
            }
            Ev::FrameArrival { from, gateway, frame, covers } => self.on_frame(from, gateway, frame, covers),
            Ev::NodeRetry { node } => {
                self.nodes[node].retry_pending = false;
                self.try_send(node);
            }
            Ev::OtaArrival { gateway, bridged } => self.on_ota_arrival(gateway, bridged),
            Ev::GatewayRetry { gateway } => {
                self.gateways[gateway].retry_pending = false;
                self.flush_gateway(gateway, Vec::new());
            }
        }
    }

    fn died(&mut self, node: usize) {
        let n = &mut self.nodes[node];
        if !n.exhausted {
            n.exhausted = true;
            n.died_at = Some(self.now);
            self.events.push(SimEvent::NodeDied {
                t: self.now,
                node: n.spec.node_id.clone(),
            });
        }
    }

    fn check_low_battery(&mut self, node: usize) {
        let n = &mut self.nodes[node];
        if !n.low_reported
            && !n.exhausted
            && (n.battery.remaining_nj as f64) < LOW_BATTERY_FRACTION * n.battery.initial_nj as f64
        {
            n.low_reported = true;
            self.events.push(SimEvent::LowBattery {
                t: self.now,
                node: n.spec.node_id.clone(),
                remaining_j: n.battery.remaining_j(),
            });
        }
    }

    fn on_sample(&mut self, node: usize, sensor: usize) {
        let now = self.now;
        let interval = Millis::from_secs_f64(self.nodes[node].spec.sensors[sensor].sampling_interval_s);
        let next = now + interval;
        if self.sampling_open(next) {
            self.schedule(next, Ev::Sample { node, sensor });
        }
        if !self.nodes[node].alive() {
            return;
        }
        let oi = self.nodes[node].org;
        let n = &mut self.nodes[node];
        let cost = joules_to_nj(n.spec.energy_costs.sample_j);
        if n.battery.debit(EnergyUse::Sample, cost).is_err() {
            self.died(node);
            return;
        }
        let n = &mut self.nodes[node];
        let reading = sample(&n.spec.sensors[sensor], now, &mut n.sensor_rngs[sensor]);
        self.stats[oi].samples += 1;
        self.events.push(SimEvent::Sample {
            t: now,
            node: n.spec.node_id.clone(),
            sensor: reading.sensor_id.clone(),
            value: reading.value,
            true_flag: reading.true_flag,
        });
        let policy = n.spec.aggregation;
        let batch = match policy.mode {
            AggregationMode::MeanOverWindow => {
                let per_window =
                    (policy.window_s / n.spec.sensors[sensor].sampling_interval_s).round() as usize;
                n.windows[sensor].push(reading);
                if n.windows[sensor].len() < per_window {
                    self.check_low_battery(node);
                    return;
                }
                std::mem::take(&mut n.windows[sensor])
            }
            _ => vec![reading],
        };
        let costs = n.spec.energy_costs;
        let out = local_process(
            &mut n.battery,
            &costs,
            &batch,
            &policy,
            sensor as u32,
            &mut n.proc[sensor],
        );
        if out.suppressed > 0 {
            self.stats[oi].suppressed += u64::from(out.suppressed);
            self.events.push(SimEvent::Suppressed {
                t: now,
                node: n.spec.node_id.clone(),
                readings: out.suppressed,
            });
        }
        self.stats[oi].lost_readings += u64::from(out.lost);
        let capacity = n.spec.buffer_capacity;
        let mut overflow = 0u64;
        for r in out.records {
            if n.outbox.len() < capacity {
                n.outbox.push_back(r);
            } else {
                overflow += u64::from(r.count);
            }
        }
        if overflow > 0 {
            self.stats[oi].lost_readings += overflow;
            self.events.push(SimEvent::Overflow {
                t: now,
                node: n.spec.node_id.clone(),
                readings: overflow,
            });
        }
        if out.exhausted {
            self.died(node);
            return;
        }
        self.check_low_battery(node);
        self.try_send(node);
    }

    fn on_node_fault(&mut self, node: usize, fault: usize, start: bool) {
        let kind = self.nodes[node].spec.faults[fault].kind;
        let n = &mut self.nodes[node];
        match kind {
            FaultKind::NodeDead => n.dead_fault = start,
            FaultKind::LinkDown => n.link_down = start,
            _ => {}
        }
        self.events.push(SimEvent::Fault {
            t: self.now,
            target: n.spec.node_id.clone(),
            kind,
            active: start,
        });
        if !start {
            match n.spec.role {
                NodeRole::Sensing => self.try_send(node),
                NodeRole::Gateway => {
                    let g = n.gateway;
                    self.flush_gateway(g, Vec::new());
                }
            }
        }
    }

    fn try_send(&mut self, node: usize) {
        let now = self.now;
        let oi = self.nodes[node].org;
        let gateway = self.nodes[node].gateway;
        loop {
            let n = &mut self.nodes[node];
            if !n.alive() || n.link_down || n.retry_pending || n.outbox.is_empty() {
                return;
            }
            let take = n.outbox.len().min(MAX_FRAME_RECORDS);
            let records: Vec<OutRecord> = n.outbox.drain(..take).collect();
            let covers: u64 = records.iter().map(|r| u64::from(r.count)).sum();
            let frame = encode_frame(&records);
            let costs = n.spec.energy_costs;
            let result = transmit(
                &mut n.battery,
                &costs,
                &n.spec.uplink,
                frame.len(),
                now,
                &mut n.link_rng,
                &mut n.ledger,
            );
            let node_id = n.spec.node_id.clone();
            let channel = n.spec.uplink.kind;
            match result {
                Ok(TransmitResult::Deferred(at)) => {
                    for r in records.into_iter().rev() {
                        n.outbox.push_front(r);
                    }
                    n.retry_pending = true;
                    self.events.push(SimEvent::FrameSent {
                        t: now,
                        node: node_id,
                        channel,
                        bytes: frame.len(),
                        records: take,
                        result: TransmitResult::Deferred(at),
                    });
                    self.schedule(at, Ev::NodeRetry { node });
                    return;
                }
                Ok(r) => {
                    let st = &mut self.stats[oi];
                    st.frames_sent += 1;
                    st.network_bytes += frame.len() as u64;
                    self.events.push(SimEvent::FrameSent {
                        t: now,
                        node: node_id,
                        channel,
                        bytes: frame.len(),
                        records: take,
                        result: r,
                    });
                    match r {
                        TransmitResult::Delivered(at) => {
                            let n = &mut self.nodes[node];
                            let at = at.max(n.last_arrival);
                            n.last_arrival = at;
                            self.in_flight[oi] += covers;
                            self.schedule(at, Ev::FrameArrival { from: node, gateway, frame, covers });
                        }
                        _ => {
                            self.stats[oi].frames_lost += 1;
                            self.stats[oi].lost_readings += covers;
                        }
                    }
                    self.check_low_battery(node);
                }
                Err(NodeDead) => {
                    let st = &mut self.stats[oi];
                    st.frames_sent += 1;
                    st.frames_lost += 1;
                    st.lost_readings += covers;
                    self.died(node);
                    return;
                }
            }
        }
    }

    fn to_gateway_records(&self, from: usize, records: Vec<OutRecord>) -> Vec<GatewayRecord> {
        let n = &self.nodes[from];
        let platform = &self.gateways[n.gateway].state.platform_id;
        records
            .into_iter()
            .map(|r| {
                let s = &n.spec.sensors[r.sensor_idx as usize];
                GatewayRecord {
                    source: SourceRecord {
                        sensor_id: s.sensor_id.clone(),
                        platform_id: platform.clone(),
                        parameter: s.parameter.clone(),
                        unit: s.unit.clone(),
                        measured_at: r.t,
                        value: scaled_to_decimal(scale_value(r.value)),
                        lat: n.spec.location.lat,
                        lon: n.spec.location.lon,
                        depth_m: n.spec.location.depth_m,
                    },
                    covers: r.count,
                }
            })
            .collect()
    }

    fn on_frame(&mut self, from: usize, gateway: usize, frame: Vec<u8>, covers: u64) {
        let now = self.now;
        let oi = self.gateways[gateway].org;
        self.in_flight[oi] -= covers;
        let gw_node = self.gateways[gateway].node;
        let from_id = self.nodes[from].spec.node_id.clone();
        let gw_id = self.nodes[gw_node].spec.node_id.clone();
        let drop = |w: &mut World, reason: &str| {
            w.stats[oi].lost_readings += covers;
            w.events.push(SimEvent::FrameDropped {
                t: now,
                gateway: gw_id.clone(),
                from: from_id.clone(),
                readings: covers,
                reason: reason.to_owned(),
            });
        };
        if !self.nodes[gw_node].alive() {
            drop(self, "gateway down");
            return;
        }
        let g = &mut self.nodes[gw_node];
        let rx = joules_to_nj(g.spec.energy_costs.rx_per_byte_j * frame.len() as f64);
        if g.battery.debit(EnergyUse::Rx, rx).is_err() {
            self.died(gw_node);
            drop(self, "gateway battery exhausted");
            return;
        }
        self.check_low_battery(gw_node);
        let records = match decode_frame(&frame) {
            Ok(r) => r,
            Err(e) => {
                drop(self, &e.to_string());
                return;
            }
        };
        self.events.push(SimEvent::FrameReceived {
            t: now,
            gateway: gw_id,
            from: from_id,
            records: records.len(),
        });
        let recs = self.to_gateway_records(from, records);
        self.flush_gateway(gateway, recs);
    }

    fn flush_gateway(&mut self, gateway: usize, records: Vec<GatewayRecord>) {
        let gw_node = self.gateways[gateway].node;
        let oi = self.gateways[gateway].org;
        let n = &self.nodes[gw_node];
        let can_send = n.alive() && !n.link_down && !self.gateways[gateway].retry_pending;
        let out = gateway_bridge(&mut self.gateways[gateway].state, records, can_send);
        if !out.overflow.is_empty() {
            let readings: u64 = out.overflow.iter().map(|r| u64::from(r.covers)).sum();
            self.stats[oi].lost_readings += readings;
            self.events.push(SimEvent::Overflow {
                t: self.now,
                node: self.nodes[gw_node].spec.node_id.clone(),
                readings,
            });
        }
        self.send_uplinks(gateway, out.publishes);
    }

    fn send_uplinks(&mut self, gateway: usize, publishes: Vec<Bridged>) {
        let now = self.now;
        let g = &self.gateways[gateway];
        let (gw_node, oi, delivery, retransmit) = (g.node, g.org, g.delivery, g.retransmit);
        let mut queue: VecDeque<Bridged> = publishes.into();
        while let Some(b) = queue.pop_front() {
            if delivery == GatewayDelivery::Edge {
                self.in_flight[oi] += u64::from(b.record.covers);
                self.on_ota_arrival(gateway, b);
                continue;
            }
            let n = &mut self.nodes[gw_node];
            let costs = n.spec.energy_costs;
            let result = transmit(
                &mut n.battery,
                &costs,
                &n.spec.uplink,
                b.payload.len(),
                now,
                &mut n.link_rng,
                &mut n.ledger,
            );
            let requeue = |w: &mut World, b: Bridged, rest: VecDeque<Bridged>| {
                let st = &mut w.gateways[gateway].state;
                for r in rest.into_iter().rev() {
                    st.requeue_front(r.record);
                }
                st.requeue_front(b.record);
            };
            match result {
                Ok(TransmitResult::Delivered(at)) => {
                    let g = &mut self.gateways[gateway];
                    let at = at.max(g.last_arrival);
                    g.last_arrival = at;
                    self.stats[oi].ota_sent += 1;
                    self.in_flight[oi] += u64::from(b.record.covers);
                    self.schedule(at, Ev::OtaArrival { gateway, bridged: b });
                    self.check_low_battery(gw_node);
                }
                Ok(TransmitResult::Lost) => {
                    self.stats[oi].ota_sent += 1;
                    self.stats[oi].ota_lost += 1;
                    self.events.push(SimEvent::UplinkLost {
                        t: now,
                        org: self.gateways[gateway].state.org_id.clone(),
                        platform: self.gateways[gateway].state.platform_id.clone(),
                        bytes: b.payload.len(),
                    });
                    if b.qos == QoS::AtMostOnce {
                        self.stats[oi].lost_readings += u64::from(b.record.covers);
                        continue;
                    }
                    let rest = std::mem::take(&mut queue);
                    requeue(self, b, rest);
                    self.gateways[gateway].retry_pending = true;
                    self.schedule(now + retransmit, Ev::GatewayRetry { gateway });
                    return;
                }
                Ok(TransmitResult::Deferred(at)) => {
                    let rest = std::mem::take(&mut queue);
                    requeue(self, b, rest);
                    self.gateways[gateway].retry_pending = true;
                    self.schedule(at, Ev::GatewayRetry { gateway });
                    return;
                }
                Err(NodeDead) => {
                    self.stats[oi].ota_sent += 1;
                    self.stats[oi].ota_lost += 1;
                    self.stats[oi].lost_readings += u64::from(b.record.covers);
                    let rest = std::mem::take(&mut queue);
                    let st = &mut self.gateways[gateway].state;
                    for r in rest.into_iter().rev() {
                        st.requeue_front(r.record);
                    }
                    self.died(gw_node);
                    return;
                }
            }
        }
    }

    fn on_ota_arrival(&mut self, gateway: usize, b: Bridged) {
        let g = &self.gateways[gateway];
        let oi = g.org;
        let covers = b.record.covers;
        self.in_flight[oi] -= u64::from(covers);
        self.stats[oi].delivered_readings += u64::from(covers);
        self.events.push(SimEvent::Uplink {
            t: self.now,
            org: g.state.org_id.clone(),
            platform: g.state.platform_id.clone(),
            topic: b.topic.to_string(),
            bytes: b.payload.len(),
            delivery: g.delivery,
        });
        self.uplinks.push(Uplink {
            org_id: g.state.org_id.clone(),
            platform_id: g.state.platform_id.clone(),
            delivery: g.delivery,
            topic: b.topic,
            payload: b.payload,
            qos: b.qos,
            at: self.now,
            measured_at: b.record.source.measured_at,
            covers,
            record: b.record.source,
        });
    }
}

/// JSON-lines rendering of an event log.
pub fn events_to_jsonl(events: &[SimEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}
