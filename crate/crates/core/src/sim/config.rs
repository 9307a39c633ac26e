//! Simulated world description: organizations, platforms, nodes, sensors,
//! channels and fault plans.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::packet::QoS;
use crate::ingestion::wire::WireFormat;
use crate::model::Location;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Spike,
    Stuck,
    Drift,
    OutOfRange,
    NodeDead,
    LinkDown,
}

impl FaultKind {
    pub fn is_sensor_fault(self) -> bool {
        matches!(
            self,
            FaultKind::Spike | FaultKind::Stuck | FaultKind::Drift | FaultKind::OutOfRange
        )
    }
}

/// Active on `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub kind: FaultKind,
    pub start: Timestamp,
    pub end: Timestamp,
    #[serde(default)]
    pub magnitude: f64,
}

impl FaultEvent {
    pub fn active_at(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    pub base: f64,
    #[serde(default)]
    pub diurnal_amplitude: f64,
    #[serde(default)]
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidRange {
    pub min: f64,
    pub max: f64,
}

impl ValidRange {
    pub fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub sensor_id: String,
    pub parameter: String,
    pub unit: String,
    pub sampling_interval_s: f64,
    pub valid_range: ValidRange,
    pub signal: SignalModel,
    #[serde(default)]
    pub fault_plan: Vec<FaultEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyCosts {
    pub sample_j: f64,
    pub cpu_per_record_j: f64,
    pub tx_per_byte_j: f64,
    pub rx_per_byte_j: f64,
}

impl Default for EnergyCosts {
    fn default() -> Self {
        EnergyCosts {
            sample_j: 5e-3,
            cpu_per_record_j: 20e-6,
            tx_per_byte_j: 50e-6,
            rx_per_byte_j: 25e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelKind {
    #[serde(rename = "UAC")]
    Uac,
    Serial,
    #[serde(rename = "OTA")]
    Ota,
}

/// Allowed transmission window in seconds of the UTC day, `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutyWindow {
    pub start_s: u32,
    pub end_s: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub kind: ChannelKind,
    pub bandwidth_bps: f64,
    #[serde(default)]
    pub base_latency_s: f64,
    #[serde(default)]
    pub jitter_s: f64,
    #[serde(default)]
    pub frame_loss_prob: f64,
    #[serde(default)]
    pub bit_error_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duty_cycle: Option<Vec<DutyWindow>>,
    #[serde(default)]
    pub cost_per_kb: f64,
}

/// Highest UAC bandwidth accepted at load.
pub const UAC_MAX_BPS: f64 = 10_000.0;

impl ChannelModel {
    pub fn uac() -> Self {
        ChannelModel {
            kind: ChannelKind::Uac,
            bandwidth_bps: 2_000.0,
            base_latency_s: 1.5,
            jitter_s: 0.5,
            frame_loss_prob: 0.1,
            bit_error_rate: 0.0,
            duty_cycle: None,
            cost_per_kb: 0.0,
        }
    }

    pub fn serial() -> Self {
        ChannelModel {
            kind: ChannelKind::Serial,
            bandwidth_bps: 9_600.0,
            base_latency_s: 0.0,
            jitter_s: 0.0,
            frame_loss_prob: 0.0,
            bit_error_rate: 0.0,
            duty_cycle: None,
            cost_per_kb: 0.0,
        }
    }

    pub fn ota() -> Self {
        ChannelModel {
            kind: ChannelKind::Ota,
            bandwidth_bps: 1_000_000.0,
            base_latency_s: 0.3,
            jitter_s: 0.2,
            frame_loss_prob: 0.01,
            bit_error_rate: 0.0,
            duty_cycle: None,
            cost_per_kb: 0.01,
        }
    }

    pub fn lossless(mut self) -> Self {
        self.frame_loss_prob = 0.0;
        self.bit_error_rate = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationMode {
    Raw,
    MeanOverWindow,
    EventOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    pub mode: AggregationMode,
    #[serde(default)]
    pub window_s: f64,
    #[serde(default)]
    pub event_threshold: f64,
}

impl AggregationPolicy {
    pub const RAW: AggregationPolicy = AggregationPolicy {
        mode: AggregationMode::Raw,
        window_s: 0.0,
        event_threshold: 0.0,
    };

    pub fn mean_over(window_s: f64) -> Self {
        AggregationPolicy {
            mode: AggregationMode::MeanOverWindow,
            window_s,
            event_threshold: 0.0,
        }
    }

    pub fn event_only(threshold: f64) -> Self {
        AggregationPolicy {
            mode: AggregationMode::EventOnly,
            window_s: 0.0,
            event_threshold: threshold,
        }
    }
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        AggregationPolicy::RAW
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Sensing,
    Gateway,
}

fn default_buffer() -> usize {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: String,
    pub role: NodeRole,
    pub battery_j: f64,
    #[serde(default)]
    pub energy_costs: EnergyCosts,
    pub location: Location,
    #[serde(default)]
    pub sensors: Vec<SensorSpec>,
    /// Sensing nodes: link to the gateway. Gateways: the OTA carrier link.
    pub uplink: ChannelModel,
    #[serde(default)]
    pub aggregation: AggregationPolicy,
    #[serde(default = "default_buffer")]
    pub buffer_capacity: usize,
    /// NodeDead and LinkDown events; LinkDown applies to `uplink`.
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
}

/// How a gateway hands records to the platform side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayDelivery {
    /// Through the network carrier gateway: OTA latency, loss and cost.
    Ota,
    /// Edge adapter co-located with the gateway: wired, no carrier cost.
    Edge,
}

fn default_qos() -> QoS {
    QoS::AtLeastOnce
}

fn default_retransmit_s() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformSpec {
    pub platform_id: String,
    pub nodes: Vec<NodeSpec>,
    pub gateway: NodeSpec,
    #[serde(default = "default_qos")]
    pub qos: QoS,
    #[serde(default = "default_retransmit_s")]
    pub retransmit_timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrgSpec {
    pub org_id: String,
    pub wire_format: WireFormat,
    pub delivery: GatewayDelivery,
    pub platforms: Vec<PlatformSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub start: Timestamp,
    /// No samples are taken at or after this instant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_end: Option<Timestamp>,
    pub orgs: Vec<OrgSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {reason}")]
pub struct SimConfigError {
    pub path: String,
    pub reason: String,
}

fn err(path: impl Into<String>, reason: impl Into<String>) -> SimConfigError {
    SimConfigError {
        path: path.into(),
        reason: reason.into(),
    }
}

fn check_prob(path: &str, p: f64) -> Result<(), SimConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(err(path, format!("probability {p} outside [0, 1]")))
    }
}

fn validate_channel(path: &str, c: &ChannelModel, role: NodeRole) -> Result<(), SimConfigError> {
    if !(c.bandwidth_bps > 0.0) {
        return Err(err(format!("{path}.bandwidth_bps"), "must be positive"));
    }
    if c.base_latency_s < 0.0 || c.jitter_s < 0.0 || c.cost_per_kb < 0.0 {
        return Err(err(path, "latency, jitter and cost must be non-negative"));
    }
    check_prob(&format!("{path}.frame_loss_prob"), c.frame_loss_prob)?;
    check_prob(&format!("{path}.bit_error_rate"), c.bit_error_rate)?;
    match c.kind {
        ChannelKind::Uac if c.bandwidth_bps > UAC_MAX_BPS => {
            return Err(err(format!("{path}.bandwidth_bps"), format!("UAC above {UAC_MAX_BPS} bps")))
        }
        ChannelKind::Serial if c.frame_loss_prob != 0.0 || c.bit_error_rate != 0.0 => {
            return Err(err(path, "serial links are lossless"))
        }
        ChannelKind::Ota if role == NodeRole::Sensing => {
            return Err(err(path, "sensing nodes reach the gateway over UAC or serial"))
        }
        kind if role == NodeRole::Gateway && kind != ChannelKind::Ota => {
            return Err(err(path, "gateway uplink must be OTA"))
        }
        _ => {}
    }
    if let Some(windows) = &c.duty_cycle {
        if windows.is_empty() {
            return Err(err(format!("{path}.duty_cycle"), "no allowed window"));
        }
        for w in windows {
            if w.start_s >= w.end_s || w.end_s > 86_400 {
                return Err(err(format!("{path}.duty_cycle"), "window must satisfy start < end <= 86400"));
            }
        }
    }
    Ok(())
}

fn validate_fault(path: &str, f: &FaultEvent, sensor: bool) -> Result<(), SimConfigError> {
    if f.start >= f.end {
        return Err(err(path, "fault start must precede end"));
    }
    if sensor != f.kind.is_sensor_fault() {
        return Err(err(
            path,
            format!("{:?} attaches to {}", f.kind, if sensor { "nodes or links" } else { "sensors" }),
        ));
    }
    if f.kind == FaultKind::OutOfRange && f.magnitude == 0.0 {
        return Err(err(path, "out-of-range magnitude must be non-zero"));
    }
    Ok(())
}

fn validate_node(path: &str, n: &NodeSpec, ids: &mut BTreeSet<String>) -> Result<(), SimConfigError> {
    if n.node_id.is_empty() || !ids.insert(n.node_id.clone()) {
        return Err(err(format!("{path}.node_id"), format!("empty or duplicate id {:?}", n.node_id)));
    }
    if !(n.battery_j > 0.0) {
        return Err(err(format!("{path}.battery_j"), "must be positive"));
    }
    let e = &n.energy_costs;
    if e.sample_j < 0.0 || e.cpu_per_record_j < 0.0 || e.rx_per_byte_j < 0.0 {
        return Err(err(format!("{path}.energy_costs"), "costs must be non-negative"));
    }
    if !(e.tx_per_byte_j > e.cpu_per_record_j) {
        return Err(err(
            format!("{path}.energy_costs"),
            "tx_per_byte_j must exceed cpu_per_record_j",
        ));
    }
    validate_channel(&format!("{path}.uplink"), &n.uplink, n.role)?;
    if n.role == NodeRole::Gateway && !n.sensors.is_empty() {
        return Err(err(format!("{path}.sensors"), "gateways carry no sensors"));
    }
    if n.buffer_capacity == 0 {
        return Err(err(format!("{path}.buffer_capacity"), "must be positive"));
    }
    for (i, f) in n.faults.iter().enumerate() {
        validate_fault(&format!("{path}.faults[{i}]"), f, false)?;
    }
    let agg = &n.aggregation;
    for (i, s) in n.sensors.iter().enumerate() {
        let sp = format!("{path}.sensors[{i}]");
        if s.sensor_id.is_empty() || !ids.insert(format!("sensor:{}", s.sensor_id)) {
            return Err(err(format!("{sp}.sensor_id"), format!("empty or duplicate id {:?}", s.sensor_id)));
        }
        if !(s.sampling_interval_s > 0.0) {
            return Err(err(format!("{sp}.sampling_interval_s"), "must be positive"));
        }
        if !(s.valid_range.min < s.valid_range.max) {
            return Err(err(format!("{sp}.valid_range"), "min must be below max"));
        }
        if s.signal.noise_std < 0.0 {
            return Err(err(format!("{sp}.signal.noise_std"), "must be non-negative"));
        }
        for (j, f) in s.fault_plan.iter().enumerate() {
            validate_fault(&format!("{sp}.fault_plan[{j}]"), f, true)?;
        }
        if agg.mode == AggregationMode::MeanOverWindow {
            let ratio = agg.window_s / s.sampling_interval_s;
            if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
                return Err(err(
                    format!("{path}.aggregation.window_s"),
                    format!("not a multiple of {}'s sampling interval", s.sensor_id),
                ));
            }
        }
    }
    if agg.mode == AggregationMode::EventOnly && agg.event_threshold < 0.0 {
        return Err(err(format!("{path}.aggregation.event_threshold"), "must be non-negative"));
    }
    Ok(())
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SimConfigError> {
        let mut ids = BTreeSet::new();
        let mut orgs = BTreeSet::new();
        for (oi, org) in self.orgs.iter().enumerate() {
            let op = format!("organizations[{oi}]");
            if org.org_id.is_empty() || !orgs.insert(org.org_id.clone()) {
                return Err(err(format!("{op}.org_id"), "empty or duplicate"));
            }
            let mut platforms = BTreeSet::new();
            for (pi, p) in org.platforms.iter().enumerate() {
                let pp = format!("{op}.platforms[{pi}]");
                if p.platform_id.is_empty() || !platforms.insert(p.platform_id.clone()) {
                    return Err(err(format!("{pp}.platform_id"), "empty or duplicate"));
                }
                if p.gateway.role != NodeRole::Gateway {
                    return Err(err(format!("{pp}.gateway.role"), "must be gateway"));
                }
                if !(p.retransmit_timeout_s > 0.0) {
                    return Err(err(format!("{pp}.retransmit_timeout_s"), "must be positive"));
                }
                validate_node(&format!("{pp}.gateway"), &p.gateway, &mut ids)?;
                for (ni, n) in p.nodes.iter().enumerate() {
                    if n.role != NodeRole::Sensing {
                        return Err(err(format!("{pp}.nodes[{ni}].role"), "must be sensing"));
                    }
                    validate_node(&format!("{pp}.nodes[{ni}]"), n, &mut ids)?;
                }
            }
        }
        Ok(())
    }
}
