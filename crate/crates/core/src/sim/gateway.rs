//! Surface gateway bridging: decoded in-network records become
//! organization wire-format publishes on the ingestion topic tree.

use std::collections::VecDeque;

use crate::broker::packet::QoS;
use crate::broker::topic::TopicPath;
use crate::ingestion::wire::{SourceRecord, WireFormat};

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayRecord {
    pub source: SourceRecord,
    /// Sensor readings this record accounts for.
    pub covers: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bridged {
    pub topic: TopicPath,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub record: GatewayRecord,
}

#[derive(Debug, Clone)]
pub struct GatewayState {
    pub org_id: String,
    pub platform_id: String,
    pub format: WireFormat,
    pub qos: QoS,
    pub capacity: usize,
    pub buffer: VecDeque<GatewayRecord>,
}

#[derive(Debug, Default, PartialEq)]
pub struct BridgeOutcome {
    pub publishes: Vec<Bridged>,
    /// Records refused because the buffer was full.
    pub overflow: Vec<GatewayRecord>,
}

impl GatewayState {
    pub fn new(org_id: &str, platform_id: &str, format: WireFormat, qos: QoS, capacity: usize) -> Self {
        GatewayState {
            org_id: org_id.to_owned(),
            platform_id: platform_id.to_owned(),
            format,
            qos,
            capacity,
            buffer: VecDeque::new(),
        }
    }

    /// `ingest/<org>/<platform>`
    pub fn topic(&self) -> TopicPath {
        TopicPath::from_levels(["ingest", &self.org_id, &self.platform_id]).expect("validated ids")
    }

    pub fn buffered_covers(&self) -> u64 {
        self.buffer.iter().map(|r| u64::from(r.covers)).sum()
    }

    /// Puts a record whose send failed back at the head of the queue.
    pub fn requeue_front(&mut self, record: GatewayRecord) {
        self.buffer.push_front(record);
    }

    fn bridge_one(&self, record: GatewayRecord) -> Bridged {
        let payload = self.format.encode(&[self.format.fields(&record.source)]);
        Bridged {
            topic: self.topic(),
            payload,
            qos: self.qos,
            record,
        }
    }
}

/// One publish per record. While the gateway cannot send (dead, or its
/// carrier link down) records wait in the buffer up to its capacity; once it
/// can, the whole buffer drains in measurement-time order.
pub fn gateway_bridge(gw: &mut GatewayState, records: Vec<GatewayRecord>, can_send: bool) -> BridgeOutcome {
    let mut out = BridgeOutcome::default();
    for r in records {
        if gw.buffer.len() < gw.capacity {
            gw.buffer.push_back(r);
        } else {
            out.overflow.push(r);
        }
    }
    if !can_send {
        return out;
    }
    let mut pending: Vec<GatewayRecord> = gw.buffer.drain(..).collect();
    pending.sort_by_key(|r| r.source.measured_at);
    out.publishes = pending.into_iter().map(|r| gw.bridge_one(r)).collect();
    out
}
