//! Local processing on sensing nodes: raw pass-through, windowed means and
//! change-triggered reporting.

use serde::{Deserialize, Serialize};

use super::config::{AggregationMode, AggregationPolicy, EnergyCosts};
use super::energy::{joules_to_nj, Battery, EnergyUse};
use super::signal::RawReading;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Raw,
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutRecord {
    pub record_id: u64,
    /// Index of the sensor within its node.
    pub sensor_idx: u32,
    /// Time of the last reading the record covers.
    pub t: Timestamp,
    pub kind: RecordKind,
    pub value: f64,
    pub min: f64,
    pub max: f64,
    /// Readings folded into this record.
    pub count: u32,
}

/// Per-sensor processing state kept across calls.
#[derive(Debug, Clone, Default)]
pub struct ProcessState {
    /// Previous reading seen by an EventOnly policy.
    pub prev: Option<f64>,
    pub next_record_id: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProcessOutcome {
    pub records: Vec<OutRecord>,
    /// Readings withheld by an EventOnly policy.
    pub suppressed: u32,
    /// Readings dropped because the battery ran out while processing them.
    pub lost: u32,
    pub exhausted: bool,
}

impl ProcessState {
    fn next_id(&mut self) -> u64 {
        self.next_record_id += 1;
        self.next_record_id
    }
}

/// Applies `policy` to `readings`, which must fall in one policy window.
/// Debits `cpu_per_record_j` per input reading.
pub fn local_process(
    battery: &mut Battery,
    costs: &EnergyCosts,
    readings: &[RawReading],
    policy: &AggregationPolicy,
    sensor_idx: u32,
    state: &mut ProcessState,
) -> ProcessOutcome {
    let mut out = ProcessOutcome::default();
    let cpu = joules_to_nj(costs.cpu_per_record_j);
    let mut processed = Vec::with_capacity(readings.len());
    for (i, r) in readings.iter().enumerate() {
        if battery.debit(EnergyUse::Cpu, cpu).is_err() {
            out.exhausted = true;
            out.lost = (readings.len() - i) as u32;
            break;
        }
        processed.push(r);
    }
    match policy.mode {
        AggregationMode::Raw => {
            for r in processed {
                let id = state.next_id();
                out.records.push(OutRecord {
                    record_id: id,
                    sensor_idx,
                    t: r.t,
                    kind: RecordKind::Raw,
                    value: r.value,
                    min: r.value,
                    max: r.value,
                    count: 1,
                });
            }
        }
        AggregationMode::MeanOverWindow => {
            if out.exhausted {
                // an incomplete window is not reported
                out.lost += processed.len() as u32;
            } else if let Some(last) = processed.last() {
                let n = processed.len() as f64;
                let sum: f64 = processed.iter().map(|r| r.value).sum();
                let min = processed.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
                let max = processed.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
                let id = state.next_id();
                out.records.push(OutRecord {
                    record_id: id,
                    sensor_idx,
                    t: last.t,
                    kind: RecordKind::Aggregate,
                    value: sum / n,
                    min,
                    max,
                    count: processed.len() as u32,
                });
            }
        }
        AggregationMode::EventOnly => {
            for r in processed {
                let emit = match state.prev {
                    None => true,
                    Some(p) => (r.value - p).abs() > policy.event_threshold,
                };
                state.prev = Some(r.value);
                if emit {
                    let id = state.next_id();
                    out.records.push(OutRecord {
                        record_id: id,
                        sensor_idx,
                        t: r.t,
                        kind: RecordKind::Raw,
                        value: r.value,
                        min: r.value,
                        max: r.value,
                        count: 1,
                    });
                } else {
                    out.suppressed += 1;
                }
            }
        }
    }
    out
}
