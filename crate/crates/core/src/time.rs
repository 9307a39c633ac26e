//! Epoch-millisecond timestamps shared by the simulator and the platform.

use std::fmt;
use std::ops::{Add, Sub};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

/// UTC instant with millisecond resolution, stored as milliseconds since the
/// Unix epoch. Serializes as a bare integer.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

/// 2024-01-01T00:00:00Z, the default origin of simulated worlds.
pub const DEFAULT_EPOCH: Timestamp = Timestamp(1_704_067_200_000);

pub const MS_PER_SECOND: i64 = 1_000;
pub const MS_PER_DAY: i64 = 86_400_000;

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * 1000.0).round() as i64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn plus_secs(self, secs: f64) -> Self {
        self + Millis::from_secs_f64(secs)
    }

    /// Parses an RFC 3339 / ISO-8601 timestamp with an explicit offset.
    pub fn parse_rfc3339(s: &str) -> Option<Self> {
        DateTime::parse_from_rfc3339(s.trim())
            .ok()
            .map(|dt| Timestamp(dt.with_timezone(&Utc).timestamp_millis()))
    }

    pub fn to_rfc3339(self) -> String {
        match DateTime::<Utc>::from_timestamp_millis(self.0) {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Millis, true),
            None => self.0.to_string(),
        }
    }

    /// Milliseconds elapsed since UTC midnight of the same day.
    pub fn millis_of_day(self) -> i64 {
        self.0.rem_euclid(MS_PER_DAY)
    }

    pub fn now_wall() -> Self {
        Timestamp(Utc::now().timestamp_millis())
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

/// Signed duration in milliseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Millis(pub i64);

impl Millis {
    pub fn from_secs_f64(secs: f64) -> Self {
        Millis((secs * 1000.0).round() as i64)
    }

    pub const fn from_secs(secs: i64) -> Self {
        Millis(secs * MS_PER_SECOND)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl Add<Millis> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: Millis) -> Timestamp {
        Timestamp(self.0 + rhs.0)
    }
}

impl Sub<Millis> for Timestamp {
    type Output = Timestamp;
    fn sub(self, rhs: Millis) -> Timestamp {
        Timestamp(self.0 - rhs.0)
    }
}

impl Sub for Timestamp {
    type Output = Millis;
    fn sub(self, rhs: Timestamp) -> Millis {
        Millis(self.0 - rhs.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_utc_and_offsets() {
        assert_eq!(
            Timestamp::parse_rfc3339("2024-01-01T00:00:00Z"),
            Some(DEFAULT_EPOCH)
        );
        assert_eq!(
            Timestamp::parse_rfc3339("2024-01-01T01:00:00+01:00"),
            Some(DEFAULT_EPOCH)
        );
        assert_eq!(Timestamp::parse_rfc3339("yesterday"), None);
    }

    #[test]
    fn millis_of_day_wraps() {
        let t = DEFAULT_EPOCH + Millis::from_secs(3 * 3600);
        assert_eq!(t.millis_of_day(), 3 * 3_600_000);
        assert_eq!((t + Millis(MS_PER_DAY)).millis_of_day(), 3 * 3_600_000);
    }
}
