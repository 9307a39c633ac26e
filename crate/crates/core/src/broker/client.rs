//! Sans-IO MQTT client: the publisher/subscriber side of the QoS handshakes.

use super::packet::{Connect, ConnectReturnCode, Packet, QoS};
use super::session::{Inbound, Message, Outbound, ProtocolViolation, RetryPolicy, TickOutcome};
use super::topic::{TopicFilter, TopicPath};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClientOutput {
    pub replies: Vec<Packet>,
    /// Application deliveries, in arrival order.
    pub delivered: Vec<Message>,
}

#[derive(Debug, Clone)]
pub struct Client {
    client_id: String,
    outbound: Outbound,
    inbound: Inbound,
    connected: bool,
    refused: Option<ConnectReturnCode>,
    next_sub_id: u16,
    granted: Vec<(TopicFilter, Option<QoS>)>,
    pending_subs: Vec<(u16, Vec<TopicFilter>)>,
}

impl Client {
    pub fn new(client_id: impl Into<String>, policy: RetryPolicy) -> Self {
        Client {
            client_id: client_id.into(),
            outbound: Outbound::new(policy),
            inbound: Inbound::default(),
            connected: false,
            refused: None,
            next_sub_id: 1,
            granted: Vec::new(),
            pending_subs: Vec::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn refused(&self) -> Option<ConnectReturnCode> {
        self.refused
    }

    pub fn outbound(&self) -> &Outbound {
        &self.outbound
    }

    /// Subscription results as acknowledged by the broker.
    pub fn granted(&self) -> &[(TopicFilter, Option<QoS>)] {
        &self.granted
    }

    pub fn connect_packet(&self, bearer: Option<&str>) -> Packet {
        Packet::Connect(Connect {
            client_id: self.client_id.clone(),
            username: bearer.map(|_| self.client_id.clone()),
            password: bearer.map(|b| b.as_bytes().to_vec()),
            keep_alive: 60,
            clean_session: true,
        })
    }

    pub fn publish(
        &mut self,
        topic: TopicPath,
        payload: Vec<u8>,
        qos: QoS,
        now: Timestamp,
    ) -> Option<Packet> {
        self.outbound.enqueue(Message { topic, payload, qos }, now)
    }

    pub fn subscribe(&mut self, filters: Vec<(TopicFilter, QoS)>) -> Packet {
        let id = self.next_sub_id;
        self.next_sub_id = self.next_sub_id.checked_add(1).unwrap_or(1);
        self.pending_subs
            .push((id, filters.iter().map(|(f, _)| f.clone()).collect()));
        Packet::Subscribe {
            packet_id: id,
            filters,
        }
    }

    pub fn handle(&mut self, packet: Packet, now: Timestamp) -> Result<ClientOutput, ProtocolViolation> {
        let mut out = ClientOutput::default();
        match packet {
            Packet::ConnAck { code, .. } => {
                if code == ConnectReturnCode::Accepted {
                    self.connected = true;
                } else {
                    self.refused = Some(code);
                }
            }
            Packet::Publish(p) => {
                let r = self.inbound.on_publish(&p);
                out.replies.extend(r.reply);
                if r.deliver {
                    out.delivered.push(Message {
                        topic: p.topic,
                        payload: p.payload,
                        qos: p.qos,
                    });
                }
            }
            Packet::PubAck(id) => out.replies = self.outbound.on_puback(id, now)?,
            Packet::PubRec(id) => out.replies = self.outbound.on_pubrec(id, now)?,
            Packet::PubComp(id) => out.replies = self.outbound.on_pubcomp(id, now)?,
            Packet::PubRel(id) => out.replies.push(self.inbound.on_pubrel(id)?),
            Packet::SubAck { packet_id, codes } => {
                if let Some(pos) = self.pending_subs.iter().position(|(id, _)| *id == packet_id) {
                    let (_, filters) = self.pending_subs.remove(pos);
                    self.granted.extend(filters.into_iter().zip(codes));
                }
            }
            Packet::PingResp => {}
            other => {
                return Err(ProtocolViolation {
                    kind: other.kind(),
                    packet_id: 0,
                })
            }
        }
        Ok(out)
    }

    pub fn tick(&mut self, now: Timestamp) -> TickOutcome {
        self.outbound.tick(now)
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.outbound.next_deadline()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qos2_receiver_delivers_once_per_handshake() {
        let mut c = Client::new("c", RetryPolicy::default());
        let p = super::super::engine::publish_packet(
            &TopicPath::new("a").unwrap(),
            b"x",
            QoS::ExactlyOnce,
            9,
        );
        let first = c.handle(p.clone(), Timestamp(0)).unwrap();
        assert_eq!(first.delivered.len(), 1);
        assert_eq!(first.replies, vec![Packet::PubRec(9)]);
        let again = c.handle(p, Timestamp(1)).unwrap();
        assert!(again.delivered.is_empty());
        let rel = c.handle(Packet::PubRel(9), Timestamp(2)).unwrap();
        assert_eq!(rel.replies, vec![Packet::PubComp(9)]);
    }

    #[test]
    fn suback_records_grants() {
        let mut c = Client::new("c", RetryPolicy::default());
        let f = TopicFilter::new("data/#").unwrap();
        let Packet::Subscribe { packet_id, .. } = c.subscribe(vec![(f.clone(), QoS::AtLeastOnce)]) else {
            unreachable!()
        };
        c.handle(
            Packet::SubAck {
                packet_id,
                codes: vec![None],
            },
            Timestamp(0),
        )
        .unwrap();
        assert_eq!(c.granted(), &[(f, None)]);
    }
}
