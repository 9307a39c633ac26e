//! Sender and receiver halves of the MQTT QoS 1/2 handshakes.
//!
//! Both the broker (per client session) and [`super::Client`] use these. The
//! sender keeps an inflight table with retransmission deadlines; the receiver
//! keeps the QoS 2 dedup set between PUBREC and PUBREL.
//!
//! Acknowledgements for packet ids that completed recently are tolerated and
//! ignored: the lossy transport duplicates frames, so a second PUBACK/PUBCOMP
//! or PUBREL for the same id is expected traffic, not a peer bug. Ids that
//! were never used are still protocol violations.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::packet::{Packet, PacketKind, Publish, QoS};
use super::topic::TopicPath;
use crate::time::{Millis, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: TopicPath,
    pub payload: Vec<u8>,
    pub qos: QoS,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol violation: unexpected {kind:?} for packet id {packet_id}")]
pub struct ProtocolViolation {
    pub kind: PacketKind,
    pub packet_id: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    AwaitingPubAck,
    AwaitingPubRec,
    AwaitingPubComp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InflightEntry {
    pub message: Message,
    pub phase: Phase,
    pub retransmit_deadline: Timestamp,
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retransmit_timeout: Millis,
    pub max_retries: u32,
    pub max_inflight: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retransmit_timeout: Millis(5_000),
            max_retries: 8,
            max_inflight: 100,
        }
    }
}

#[derive(Debug, Default)]
pub struct TickOutcome {
    pub resend: Vec<Packet>,
    /// Entries that exhausted `max_retries`; they are removed from the table.
    pub failed: Vec<(u16, Message)>,
}

#[derive(Debug, Clone)]
pub struct Outbound {
    policy: RetryPolicy,
    next_id: u16,
    inflight: BTreeMap<u16, InflightEntry>,
    completed: BTreeSet<u16>,
    pending: VecDeque<Message>,
    retransmissions: u64,
}

impl Outbound {
    pub fn new(policy: RetryPolicy) -> Self {
        Outbound {
            policy,
            next_id: 1,
            inflight: BTreeMap::new(),
            completed: BTreeSet::new(),
            pending: VecDeque::new(),
            retransmissions: 0,
        }
    }

    pub fn inflight(&self) -> &BTreeMap<u16, InflightEntry> {
        &self.inflight
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn retransmissions(&self) -> u64 {
        self.retransmissions
    }

    pub fn is_idle(&self) -> bool {
        self.inflight.is_empty() && self.pending.is_empty()
    }

    fn allocate_id(&mut self) -> u16 {
        loop {
            let id = self.next_id;
            self.next_id = if self.next_id == u16::MAX { 1 } else { self.next_id + 1 };
            if !self.inflight.contains_key(&id) {
                self.completed.remove(&id);
                return id;
            }
        }
    }

    fn start(&mut self, message: Message, now: Timestamp) -> Packet {
        let id = self.allocate_id();
        let phase = if message.qos == QoS::AtLeastOnce {
            Phase::AwaitingPubAck
        } else {
            Phase::AwaitingPubRec
        };
        let packet = Packet::Publish(Publish {
            topic: message.topic.clone(),
            packet_id: id,
            qos: message.qos,
            dup: false,
            payload: message.payload.clone(),
        });
        self.inflight.insert(
            id,
            InflightEntry {
                message,
                phase,
                retransmit_deadline: now + self.policy.retransmit_timeout,
                retries: 0,
            },
        );
        packet
    }

    /// Queues a message. QoS 0 goes out immediately with no state; QoS 1/2
    /// opens an inflight entry, or waits in the pending queue when
    /// `max_inflight` entries are already open.
    pub fn enqueue(&mut self, message: Message, now: Timestamp) -> Option<Packet> {
        if message.qos == QoS::AtMostOnce {
            return Some(Packet::Publish(Publish {
                topic: message.topic,
                packet_id: 0,
                qos: QoS::AtMostOnce,
                dup: false,
                payload: message.payload,
            }));
        }
        if self.inflight.len() >= self.policy.max_inflight {
            self.pending.push_back(message);
            return None;
        }
        Some(self.start(message, now))
    }

    fn drain_pending(&mut self, now: Timestamp) -> Vec<Packet> {
        let mut out = Vec::new();
        while self.inflight.len() < self.policy.max_inflight {
            match self.pending.pop_front() {
                Some(m) => out.push(self.start(m, now)),
                None => break,
            }
        }
        out
    }

    fn complete(&mut self, id: u16, now: Timestamp) -> Vec<Packet> {
        self.inflight.remove(&id);
        self.completed.insert(id);
        self.drain_pending(now)
    }

    pub fn on_puback(&mut self, id: u16, now: Timestamp) -> Result<Vec<Packet>, ProtocolViolation> {
        match self.inflight.get(&id).map(|e| e.phase) {
            Some(Phase::AwaitingPubAck) => Ok(self.complete(id, now)),
            None if self.completed.contains(&id) => Ok(Vec::new()),
            _ => Err(ProtocolViolation {
                kind: PacketKind::PubAck,
                packet_id: id,
            }),
        }
    }

    pub fn on_pubrec(&mut self, id: u16, now: Timestamp) -> Result<Vec<Packet>, ProtocolViolation> {
        let timeout = self.policy.retransmit_timeout;
        match self.inflight.get_mut(&id) {
            Some(e) if e.phase == Phase::AwaitingPubRec => {
                e.phase = Phase::AwaitingPubComp;
                e.retries = 0;
                e.retransmit_deadline = now + timeout;
                Ok(vec![Packet::PubRel(id)])
            }
            Some(e) if e.phase == Phase::AwaitingPubComp => Ok(vec![Packet::PubRel(id)]),
            None if self.completed.contains(&id) => Ok(Vec::new()),
            _ => Err(ProtocolViolation {
                kind: PacketKind::PubRec,
                packet_id: id,
            }),
        }
    }

    pub fn on_pubcomp(&mut self, id: u16, now: Timestamp) -> Result<Vec<Packet>, ProtocolViolation> {
        match self.inflight.get(&id).map(|e| e.phase) {
            Some(Phase::AwaitingPubComp) => Ok(self.complete(id, now)),
            None if self.completed.contains(&id) => Ok(Vec::new()),
            _ => Err(ProtocolViolation {
                kind: PacketKind::PubComp,
                packet_id: id,
            }),
        }
    }

    /// Retransmits every entry whose deadline has passed: PUBLISH with
    /// `dup=true` before the first acknowledgement, PUBREL afterwards.
    pub fn tick(&mut self, now: Timestamp) -> TickOutcome {
        let mut out = TickOutcome::default();
        let expired: Vec<u16> = self
            .inflight
            .iter()
            .filter(|(_, e)| e.retransmit_deadline <= now)
            .map(|(id, _)| *id)
            .collect();
        for id in expired {
            let entry = self.inflight.get_mut(&id).expect("expired id present");
            if entry.retries >= self.policy.max_retries {
                let entry = self.inflight.remove(&id).expect("present");
                out.failed.push((id, entry.message));
                continue;
            }
            entry.retries += 1;
            entry.retransmit_deadline = now + self.policy.retransmit_timeout;
            self.retransmissions += 1;
            out.resend.push(match entry.phase {
                Phase::AwaitingPubAck | Phase::AwaitingPubRec => Packet::Publish(Publish {
                    topic: entry.message.topic.clone(),
                    packet_id: id,
                    qos: entry.message.qos,
                    dup: true,
                    payload: entry.message.payload.clone(),
                }),
                Phase::AwaitingPubComp => Packet::PubRel(id),
            });
        }
        out
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.inflight.values().map(|e| e.retransmit_deadline).min()
    }
}

/// Receiver state: which QoS 2 ids have been delivered but not yet released.
#[derive(Debug, Clone, Default)]
pub struct Inbound {
    qos2_seen: BTreeSet<u16>,
    released: BTreeSet<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboundOutcome {
    /// Hand the message to the application.
    pub deliver: bool,
    pub reply: Option<Packet>,
}

impl Inbound {
    pub fn qos2_seen(&self) -> &BTreeSet<u16> {
        &self.qos2_seen
    }

    pub fn on_publish(&mut self, p: &Publish) -> InboundOutcome {
        match p.qos {
            QoS::AtMostOnce => InboundOutcome {
                deliver: true,
                reply: None,
            },
            QoS::AtLeastOnce => InboundOutcome {
                deliver: true,
                reply: Some(Packet::PubAck(p.packet_id)),
            },
            QoS::ExactlyOnce => {
                let first = self.qos2_seen.insert(p.packet_id);
                if first {
                    self.released.remove(&p.packet_id);
                }
                InboundOutcome {
                    deliver: first,
                    reply: Some(Packet::PubRec(p.packet_id)),
                }
            }
        }
    }

    pub fn on_pubrel(&mut self, id: u16) -> Result<Packet, ProtocolViolation> {
        if self.qos2_seen.remove(&id) {
            self.released.insert(id);
            Ok(Packet::PubComp(id))
        } else if self.released.contains(&id) {
            Ok(Packet::PubComp(id))
        } else {
            Err(ProtocolViolation {
                kind: PacketKind::PubRel,
                packet_id: id,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(qos: QoS) -> Message {
        Message {
            topic: TopicPath::new("t").unwrap(),
            payload: b"p".to_vec(),
            qos,
        }
    }

    fn id_of(p: &Packet) -> u16 {
        match p {
            Packet::Publish(p) => p.packet_id,
            _ => panic!("not a publish: {p:?}"),
        }
    }

    #[test]
    fn qos1_retransmits_with_dup_after_deadline() {
        let mut out = Outbound::new(RetryPolicy::default());
        let p = out.enqueue(msg(QoS::AtLeastOnce), Timestamp(0)).unwrap();
        assert!(out.tick(Timestamp(4_999)).resend.is_empty());
        let t = out.tick(Timestamp(5_000));
        assert_eq!(t.resend.len(), 1);
        match &t.resend[0] {
            Packet::Publish(r) => {
                assert!(r.dup);
                assert_eq!(r.packet_id, id_of(&p));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn retries_are_bounded() {
        let policy = RetryPolicy {
            max_retries: 2,
            ..RetryPolicy::default()
        };
        let mut out = Outbound::new(policy);
        out.enqueue(msg(QoS::AtLeastOnce), Timestamp(0));
        assert_eq!(out.tick(Timestamp(5_000)).resend.len(), 1);
        assert_eq!(out.tick(Timestamp(10_000)).resend.len(), 1);
        let last = out.tick(Timestamp(15_000));
        assert!(last.resend.is_empty());
        assert_eq!(last.failed.len(), 1);
        assert!(out.inflight().is_empty());
    }

    #[test]
    fn unknown_and_stale_acks() {
        let mut out = Outbound::new(RetryPolicy::default());
        assert!(out.on_puback(42, Timestamp(0)).is_err());
        let id = id_of(&out.enqueue(msg(QoS::AtLeastOnce), Timestamp(0)).unwrap());
        assert!(out.on_puback(id, Timestamp(1)).unwrap().is_empty());
        // duplicate ack for a completed id is ignored
        assert!(out.on_puback(id, Timestamp(2)).is_ok());
    }

    #[test]
    fn qos2_sender_phases() {
        let mut out = Outbound::new(RetryPolicy::default());
        let id = id_of(&out.enqueue(msg(QoS::ExactlyOnce), Timestamp(0)).unwrap());
        assert!(out.on_pubcomp(id, Timestamp(1)).is_err());
        assert_eq!(out.on_pubrec(id, Timestamp(1)).unwrap(), vec![Packet::PubRel(id)]);
        // retransmission after PUBREC resends PUBREL
        assert_eq!(out.tick(Timestamp(5_001)).resend, vec![Packet::PubRel(id)]);
        assert!(out.on_pubcomp(id, Timestamp(5_002)).is_ok());
        assert!(out.is_idle());
    }

    #[test]
    fn max_inflight_queues_then_drains() {
        let policy = RetryPolicy {
            max_inflight: 1,
            ..RetryPolicy::default()
        };
        let mut out = Outbound::new(policy);
        let a = out.enqueue(msg(QoS::AtLeastOnce), Timestamp(0)).unwrap();
        assert!(out.enqueue(msg(QoS::AtLeastOnce), Timestamp(0)).is_none());
        assert_eq!(out.pending_len(), 1);
        let next = out.on_puback(id_of(&a), Timestamp(1)).unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(out.pending_len(), 0);
    }

    #[test]
    fn qos2_receiver_dedups_until_release() {
        let mut inb = Inbound::default();
        let p = Publish {
            topic: TopicPath::new("t").unwrap(),
            packet_id: 5,
            qos: QoS::ExactlyOnce,
            dup: false,
            payload: vec![],
        };
        assert!(inb.on_publish(&p).deliver);
        let dup = Publish { dup: true, ..p.clone() };
        let again = inb.on_publish(&dup);
        assert!(!again.deliver);
        assert_eq!(again.reply, Some(Packet::PubRec(5)));
        assert_eq!(inb.on_pubrel(5).unwrap(), Packet::PubComp(5));
        assert_eq!(inb.on_pubrel(5).unwrap(), Packet::PubComp(5));
        assert!(inb.on_pubrel(6).is_err());
        // the id is free again: a new message with it is delivered
        assert!(inb.on_publish(&p).deliver);
    }
}
