//! Seeded in-memory transport with drop, duplicate and delay injection.
//!
//! Frames travel as encoded MQTT bytes so every hop exercises the codec.
//! Each directed link keeps FIFO order: a frame never overtakes an earlier
//! frame on the same link, as with the TCP connection it stands in for.

use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Reverse;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::packet::{encode_packet, EncodeError, Packet};
use crate::time::{Millis, Timestamp};

/// Broker endpoint name used on every link.
pub const BROKER: &str = "$broker";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkProfile {
    pub drop_prob: f64,
    pub dup_prob: f64,
    pub min_delay_ms: i64,
    pub max_delay_ms: i64,
}

impl Default for LinkProfile {
    fn default() -> Self {
        LinkProfile::lossless()
    }
}

impl LinkProfile {
    pub fn lossless() -> Self {
        LinkProfile {
            drop_prob: 0.0,
            dup_prob: 0.0,
            min_delay_ms: 1,
            max_delay_ms: 1,
        }
    }

    pub fn lossy(drop_prob: f64, dup_prob: f64) -> Self {
        LinkProfile {
            drop_prob,
            dup_prob,
            min_delay_ms: 1,
            max_delay_ms: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub from: String,
    pub to: String,
    pub bytes: Vec<u8>,
    pub arrival: Timestamp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
}

#[derive(Debug)]
pub struct LossyTransport {
    rng: ChaCha8Rng,
    default_profile: LinkProfile,
    links: BTreeMap<(String, String), LinkProfile>,
    last_arrival: BTreeMap<(String, String), Timestamp>,
    queue: BinaryHeap<Reverse<(Timestamp, u64)>>,
    frames: BTreeMap<u64, Frame>,
    seq: u64,
    stats: TransportStats,
}

impl LossyTransport {
    pub fn new(seed: u64, default_profile: LinkProfile) -> Self {
        LossyTransport {
            rng: ChaCha8Rng::seed_from_u64(seed),
            default_profile,
            links: BTreeMap::new(),
            last_arrival: BTreeMap::new(),
            queue: BinaryHeap::new(),
            frames: BTreeMap::new(),
            seq: 0,
            stats: TransportStats::default(),
        }
    }

    pub fn set_link(&mut self, from: &str, to: &str, profile: LinkProfile) {
        self.links.insert((from.to_owned(), to.to_owned()), profile);
    }

    pub fn stats(&self) -> TransportStats {
        self.stats
    }

    fn profile(&self, key: &(String, String)) -> LinkProfile {
        self.links.get(key).copied().unwrap_or(self.default_profile)
    }

    fn schedule(&mut self, key: &(String, String), bytes: Vec<u8>, now: Timestamp, p: &LinkProfile) {
        let delay = if p.max_delay_ms > p.min_delay_ms {
            self.rng.gen_range(p.min_delay_ms..=p.max_delay_ms)
        } else {
            p.min_delay_ms
        };
        let floor = self.last_arrival.get(key).copied().unwrap_or(Timestamp(i64::MIN));
        let arrival = (now + Millis(delay)).max(floor);
        self.last_arrival.insert(key.clone(), arrival);
        self.seq += 1;
        self.queue.push(Reverse((arrival, self.seq)));
        self.frames.insert(
            self.seq,
            Frame {
                from: key.0.clone(),
                to: key.1.clone(),
                bytes,
                arrival,
            },
        );
    }

    /// Encodes and submits a packet. Returns how many copies were scheduled
    /// (0 when dropped, 2 when duplicated).
    pub fn send(&mut self, from: &str, to: &str, packet: &Packet, now: Timestamp) -> Result<usize, EncodeError> {
        let bytes = encode_packet(packet)?;
        Ok(self.send_bytes(from, to, bytes, now))
    }

    pub fn send_bytes(&mut self, from: &str, to: &str, bytes: Vec<u8>, now: Timestamp) -> usize {
        let key = (from.to_owned(), to.to_owned());
        let p = self.profile(&key);
        self.stats.sent += 1;
        // one draw per decision keeps the stream aligned regardless of outcome
        let drop_draw: f64 = self.rng.gen();
        let dup_draw: f64 = self.rng.gen();
        if drop_draw < p.drop_prob {
            self.stats.dropped += 1;
            return 0;
        }
        if dup_draw < p.dup_prob {
            self.stats.duplicated += 1;
            self.schedule(&key, bytes.clone(), now, &p);
            self.schedule(&key, bytes, now, &p);
            2
        } else {
            self.schedule(&key, bytes, now, &p);
            1
        }
    }

    pub fn next_arrival(&self) -> Option<Timestamp> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    /// Removes and returns every frame due at or before `now`, in arrival order.
    pub fn poll(&mut self, now: Timestamp) -> Vec<Frame> {
        let mut out = Vec::new();
        while let Some(Reverse((t, seq))) = self.queue.peek().copied() {
            if t > now {
                break;
            }
            self.queue.pop();
            if let Some(f) = self.frames.remove(&seq) {
                self.stats.delivered += 1;
                out.push(f);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}
