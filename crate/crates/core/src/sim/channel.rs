//! Link transmission: duty-cycle windows, energy debit, loss, latency and
//! carrier cost.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ChannelKind, ChannelModel, DutyWindow, EnergyCosts};
use super::energy::{joules_to_nj, Battery, EnergyUse};
use crate::time::{Millis, Timestamp, MS_PER_DAY, MS_PER_SECOND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "at")]
pub enum TransmitResult {
    Delivered(Timestamp),
    Lost,
    /// Outside every allowed window; retry at the given instant.
    Deferred(Timestamp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeDead;

/// Start of the allowed window containing or following `t`, or `t` itself
/// when already inside one.
pub fn next_window_start(windows: &[DutyWindow], t: Timestamp) -> Timestamp {
    let day_ms = t.millis_of_day();
    let midnight = t.0 - day_ms;
    let mut best: Option<i64> = None;
    for w in windows {
        let (s, e) = (w.start_s as i64 * MS_PER_SECOND, w.end_s as i64 * MS_PER_SECOND);
        if s <= day_ms && day_ms < e {
            return t;
        }
        let candidate = if s > day_ms { midnight + s } else { midnight + MS_PER_DAY + s };
        best = Some(best.map_or(candidate, |b| b.min(candidate)));
    }
    Timestamp(best.unwrap_or(t.0))
}

/// Running carrier cost, in currency units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub bytes: u64,
    pub cost: f64,
}

impl CostLedger {
    pub fn charge(&mut self, channel: &ChannelModel, bytes: usize) {
        if channel.kind == ChannelKind::Ota {
            self.bytes += bytes as u64;
            self.cost += channel.cost_per_kb * bytes as f64 / 1000.0;
        }
    }
}

/// Time on the wire plus propagation, rounded to the millisecond.
pub fn airtime(channel: &ChannelModel, bytes: usize, jitter_s: f64) -> Millis {
    let secs = channel.base_latency_s + (bytes as f64 * 8.0) / channel.bandwidth_bps + jitter_s;
    Millis((secs * 1000.0).round() as i64)
}

/// Sends one frame of `frame_len` bytes at `t`.
///
/// The transmit energy is spent whether or not the frame arrives. Outside
/// the duty cycle nothing is sent and nothing is spent.
pub fn transmit<R: Rng + ?Sized>(
    battery: &mut Battery,
    costs: &EnergyCosts,
    channel: &ChannelModel,
    frame_len: usize,
    t: Timestamp,
    rng: &mut R,
    ledger: &mut CostLedger,
) -> Result<TransmitResult, NodeDead> {
    if let Some(windows) = &channel.duty_cycle {
        let open = next_window_start(windows, t);
        if open != t {
            return Ok(TransmitResult::Deferred(open));
        }
    }
    let energy = joules_to_nj(costs.tx_per_byte_j * frame_len as f64);
    if battery.debit(EnergyUse::Tx, energy).is_err() {
        return Err(NodeDead);
    }
    ledger.charge(channel, frame_len);
    let loss_draw: f64 = rng.gen();
    let jitter_draw: f64 = rng.gen();
    let bits = (frame_len * 8) as i32;
    let survive = (1.0 - channel.frame_loss_prob) * (1.0 - channel.bit_error_rate).powi(bits);
    if loss_draw >= survive {
        return Ok(TransmitResult::Lost);
    }
    Ok(TransmitResult::Delivered(
        t + airtime(channel, frame_len, jitter_draw * channel.jitter_s),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::rng::substream;
    use crate::time::DEFAULT_EPOCH;

    fn send(ch: &ChannelModel, len: usize, t: Timestamp, b: &mut Battery) -> Result<TransmitResult, NodeDead> {
        transmit(b, &EnergyCosts::default(), ch, len, t, &mut substream(0, "x"), &mut CostLedger::default())
    }

    #[test]
    fn lossless_serial_airtime() {
        let mut b = Battery::new(10.0);
        let ch = ChannelModel::serial();
        let r = send(&ch, 100, DEFAULT_EPOCH, &mut b).unwrap();
        // 800 bits at 9600 bps is 83.3 ms
        assert_eq!(r, TransmitResult::Delivered(DEFAULT_EPOCH + Millis(83)));
        assert_eq!(b.debited_nj[&EnergyUse::Tx], 100 * 50_000);
    }

    #[test]
    fn certain_loss_still_costs() {
        let mut b = Battery::new(10.0);
        let mut ch = ChannelModel::uac();
        ch.frame_loss_prob = 1.0;
        assert_eq!(send(&ch, 10, DEFAULT_EPOCH, &mut b).unwrap(), TransmitResult::Lost);
        assert_eq!(b.debited_nj[&EnergyUse::Tx], 10 * 50_000);
    }

    #[test]
    fn duty_cycle_defers_to_window_start() {
        let mut b = Battery::new(10.0);
        let mut ch = ChannelModel::uac();
        // 00:00-06:00 is closed; transmissions are allowed from 06:00
        ch.duty_cycle = Some(vec![DutyWindow { start_s: 6 * 3600, end_s: 86_400 }]);
        let t = DEFAULT_EPOCH + Millis(2 * 3_600_000);
        assert_eq!(
            send(&ch, 10, t, &mut b).unwrap(),
            TransmitResult::Deferred(DEFAULT_EPOCH + Millis(6 * 3_600_000))
        );
        assert!(b.debited_nj.is_empty());
        // after the last window of the day, the next day's first window
        let windows = [DutyWindow { start_s: 3600, end_s: 7200 }];
        assert_eq!(
            next_window_start(&windows, DEFAULT_EPOCH + Millis(8 * 3_600_000)),
            DEFAULT_EPOCH + Millis(25 * 3_600_000)
        );
    }

    #[test]
    fn dead_mid_call() {
        let mut b = Battery::new(0.001);
        assert_eq!(send(&ChannelModel::serial(), 100, DEFAULT_EPOCH, &mut b), Err(NodeDead));
        assert!(b.is_empty());
    }

    #[test]
    fn ota_cost_accrues() {
        let mut ledger = CostLedger::default();
        let mut b = Battery::new(10.0);
        transmit(
            &mut b,
            &EnergyCosts::default(),
            &ChannelModel::ota(),
            2000,
            DEFAULT_EPOCH,
            &mut substream(0, "x"),
            &mut ledger,
        )
        .unwrap();
        assert_eq!(ledger.bytes, 2000);
        assert!((ledger.cost - 0.02).abs() < 1e-12);
    }
}
