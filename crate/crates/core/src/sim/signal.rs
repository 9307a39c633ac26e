//! Synthetic sensor signals with fault injection.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{FaultKind, SensorSpec, SignalModel};
use crate::time::{Timestamp, MS_PER_DAY};

/// Ground truth attached to each reading. Only test oracles look at it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueFlag {
    Clean,
    Spike,
    Stuck,
    Drift,
    OutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawReading {
    pub sensor_id: String,
    pub t: Timestamp,
    pub value: f64,
    pub true_flag: TrueFlag,
}

/// Noise-free signal: base plus a daily sinusoid.
pub fn clean_signal(s: &SignalModel, t: Timestamp) -> f64 {
    let phase = t.millis_of_day() as f64 / MS_PER_DAY as f64;
    s.base + s.diurnal_amplitude * (TAU * phase).sin()
}

pub fn sample<R: Rng + ?Sized>(sensor: &SensorSpec, t: Timestamp, rng: &mut R) -> RawReading {
    // the draw is taken even with zero noise so streams stay aligned
    let z: f64 = rng.sample(StandardNormal);
    let mut value = clean_signal(&sensor.signal, t) + sensor.signal.noise_std * z;
    let mut true_flag = TrueFlag::Clean;
    for f in sensor.fault_plan.iter().filter(|f| f.active_at(t)) {
        match f.kind {
            FaultKind::Spike => {
                value += f.magnitude;
                true_flag = TrueFlag::Spike;
            }
            FaultKind::Stuck => {
                value = clean_signal(&sensor.signal, f.start);
                true_flag = TrueFlag::Stuck;
            }
            FaultKind::Drift => {
                let frac = (t - f.start).0 as f64 / (f.end - f.start).0 as f64;
                value += f.magnitude * frac;
                true_flag = TrueFlag::Drift;
            }
            FaultKind::OutOfRange => {
                value = if f.magnitude > 0.0 {
                    sensor.valid_range.max + f.magnitude
                } else {
                    sensor.valid_range.min + f.magnitude
                };
                true_flag = TrueFlag::OutOfRange;
            }
            FaultKind::NodeDead | FaultKind::LinkDown => {}
        }
    }
    RawReading {
        sensor_id: sensor.sensor_id.clone(),
        t,
        value,
        true_flag,
    }
}
