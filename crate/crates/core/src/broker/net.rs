//! A broker and its clients wired over a [`LossyTransport`], driven by a
//! virtual clock.

use std::collections::BTreeMap;

use super::client::Client;
use super::engine::{Broker, BrokerError, SessionFailed, TransportAction};
use super::packet::{decode_packet, Packet, QoS};
use super::session::{Message, RetryPolicy};
use super::topic::{TopicFilter, TopicPath};
use super::transport::{LossyTransport, TransportStats, BROKER};
use crate::identity::Access;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetEvent {
    SessionFailed(SessionFailed),
    /// Client-side publish abandoned after exhausting retries.
    ClientGaveUp { client_id: String, packet_id: u16 },
    Closed { client_id: String, reason: String },
    Rejected { client_id: String, error: String },
}

#[derive(Debug)]
pub struct LocalNet {
    broker: Broker,
    clients: BTreeMap<String, Client>,
    transport: LossyTransport,
    now: Timestamp,
    inbox: BTreeMap<String, Vec<(Timestamp, Message)>>,
    events: Vec<NetEvent>,
}

impl LocalNet {
    pub fn new(broker: Broker, transport: LossyTransport, start: Timestamp) -> Self {
        LocalNet {
            broker,
            clients: BTreeMap::new(),
            transport,
            now: start,
            inbox: BTreeMap::new(),
            events: Vec::new(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn broker_mut(&mut self) -> &mut Broker {
        &mut self.broker
    }

    pub fn client(&self, id: &str) -> Option<&Client> {
        self.clients.get(id)
    }

    pub fn transport_stats(&self) -> TransportStats {
        self.transport.stats()
    }

    pub fn transport_mut(&mut self) -> &mut LossyTransport {
        &mut self.transport
    }

    pub fn events(&self) -> &[NetEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<NetEvent> {
        std::mem::take(&mut self.events)
    }

    /// Opens a session for a client whose identity was established out of
    /// band (in-process components). The CONNACK travels over the link.
    pub fn attach(&mut self, client_id: &str, access: Access, policy: RetryPolicy) -> Result<(), BrokerError> {
        let actions = self.broker.attach(client_id, access)?;
        self.clients
            .insert(client_id.to_owned(), Client::new(client_id, policy));
        self.dispatch(actions);
        Ok(())
    }

    /// Connects with a bearer token carried in the CONNECT password.
    pub fn connect(&mut self, client_id: &str, bearer: &str, policy: RetryPolicy) {
        let client = Client::new(client_id, policy);
        let packet = client.connect_packet(Some(bearer));
        self.clients.insert(client_id.to_owned(), client);
        self.send_to_broker(client_id, &packet);
    }

    pub fn subscribe(&mut self, client_id: &str, filters: Vec<(TopicFilter, QoS)>) {
        let Some(c) = self.clients.get_mut(client_id) else { return };
        let packet = c.subscribe(filters);
        self.send_to_broker(client_id, &packet);
    }

    pub fn publish(&mut self, client_id: &str, topic: TopicPath, payload: Vec<u8>, qos: QoS) {
        let now = self.now;
        let Some(c) = self.clients.get_mut(client_id) else { return };
        if let Some(packet) = c.publish(topic, payload, qos, now) {
            self.send_to_broker(client_id, &packet);
        }
    }

    /// Application messages delivered to `client_id` since the last call.
    pub fn take_delivered(&mut self, client_id: &str) -> Vec<(Timestamp, Message)> {
        self.inbox.remove(client_id).unwrap_or_default()
    }

    /// Everything still waiting for an acknowledgement, on both sides.
    pub fn inflight(&self) -> usize {
        self.broker.inflight_count()
            + self
                .clients
                .values()
                .map(|c| c.outbound().inflight().len() + c.outbound().pending_len())
                .sum::<usize>()
    }

    pub fn is_quiescent(&self) -> bool {
        self.transport.is_empty() && self.inflight() == 0
    }

    fn send_to_broker(&mut self, client_id: &str, packet: &Packet) {
        let now = self.now;
        if let Err(e) = self.transport.send(client_id, BROKER, packet, now) {
            self.events.push(NetEvent::Rejected {
                client_id: client_id.to_owned(),
                error: e.to_string(),
            });
        }
    }

    fn dispatch(&mut self, actions: Vec<TransportAction>) {
        let now = self.now;
        for a in actions {
            match a {
                TransportAction::Send { client_id, packet } => {
                    if let Err(e) = self.transport.send(BROKER, &client_id, &packet, now) {
                        self.events.push(NetEvent::Rejected {
                            client_id,
                            error: e.to_string(),
                        });
                    }
                }
                TransportAction::Close { client_id, reason } => {
                    self.events.push(NetEvent::Closed { client_id, reason })
                }
                TransportAction::SessionFailed(f) => self.events.push(NetEvent::SessionFailed(f)),
            }
        }
    }

    /// Earliest pending arrival or retransmission deadline.
    pub fn next_event(&self) -> Option<Timestamp> {
        [
            self.transport.next_arrival(),
            self.broker.next_deadline(),
            self.clients.values().filter_map(Client::next_deadline).min(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    fn deliver_frames(&mut self) {
        for frame in self.transport.poll(self.now) {
            let packet = match decode_packet(&frame.bytes) {
                Ok(p) => p,
                Err(e) => {
                    self.events.push(NetEvent::Rejected {
                        client_id: frame.from,
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            if frame.to == BROKER {
                match self.broker.handle_packet(&frame.from, packet, self.now) {
                    Ok(actions) => self.dispatch(actions),
                    Err(e) => self.events.push(NetEvent::Rejected {
                        client_id: frame.from,
                        error: e.to_string(),
                    }),
                }
            } else if let Some(client) = self.clients.get_mut(&frame.to) {
                match client.handle(packet, self.now) {
                    Ok(out) => {
                        let now = self.now;
                        if !out.delivered.is_empty() {
                            self.inbox
                                .entry(frame.to.clone())
                                .or_default()
                                .extend(out.delivered.into_iter().map(|m| (now, m)));
                        }
                        for r in out.replies {
                            self.send_to_broker(&frame.to, &r);
                        }
                    }
                    Err(e) => self.events.push(NetEvent::Rejected {
                        client_id: frame.to,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }

    fn tick_all(&mut self) {
        let actions = self.broker.tick(self.now);
        self.dispatch(actions);
        let now = self.now;
        let mut resend = Vec::new();
        for (id, c) in self.clients.iter_mut() {
            let out = c.tick(now);
            for p in out.resend {
                resend.push((id.clone(), p));
            }
            for (packet_id, _) in out.failed {
                self.events.push(NetEvent::ClientGaveUp {
                    client_id: id.clone(),
                    packet_id,
                });
            }
        }
        for (id, p) in resend {
            self.send_to_broker(&id, &p);
        }
    }

    /// Processes arrivals and retransmission deadlines up to and including
    /// `until`, in time order.
    pub fn advance(&mut self, until: Timestamp) {
        while let Some(t) = self.next_event() {
            if t > until {
                break;
            }
            self.now = self.now.max(t);
            self.deliver_frames();
            self.tick_all();
        }
        self.now = self.now.max(until);
    }

    /// Advances until nothing is in flight or `limit` is reached.
    pub fn run_until_quiescent(&mut self, limit: Timestamp) {
        while !self.is_quiescent() {
            match self.next_event() {
                Some(t) if t <= limit => self.advance(t),
                _ => break,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::engine::BrokerConfig;
    use crate::broker::transport::LinkProfile;
    use crate::identity::{Action, Grant, Principal, Role};

    fn op() -> Access {
        Access::new(
            Principal::new("op", "platform", &[Role::Operator]),
            vec![
                Grant::topic(Action::Publish, "#"),
                Grant::topic(Action::Subscribe, "#"),
            ],
        )
    }

    fn net(profile: LinkProfile) -> LocalNet {
        let mut n = LocalNet::new(
            Broker::new("b", BrokerConfig::default()),
            LossyTransport::new(11, LinkProfile::lossless()),
            Timestamp(0),
        );
        n.transport_mut().set_link(BROKER, "sub", profile);
        n.transport_mut().set_link("sub", BROKER, profile);
        n.attach("pub", op(), RetryPolicy::default()).unwrap();
        n.attach("sub", op(), RetryPolicy::default()).unwrap();
        n.subscribe("sub", vec![(TopicFilter::new("#").unwrap(), QoS::ExactlyOnce)]);
        n.advance(Timestamp(100));
        n
    }

    #[test]
    fn qos1_first_publish_dropped_is_redelivered_with_dup() {
        let mut n = net(LinkProfile::lossless());
        // scripted loss: the broker's first PUBLISH to the subscriber vanishes
        n.transport_mut().set_link(
            BROKER,
            "sub",
            LinkProfile {
                drop_prob: 1.0,
                ..LinkProfile::lossless()
            },
        );
        n.publish("pub", TopicPath::new("a").unwrap(), b"m".to_vec(), QoS::AtLeastOnce);
        n.advance(Timestamp(200));
        assert!(n.take_delivered("sub").is_empty());
        n.transport_mut().set_link(BROKER, "sub", LinkProfile::lossless());
        n.advance(Timestamp(5_200));
        let got = n.take_delivered("sub");
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1.qos, QoS::AtLeastOnce);
        assert!(n.broker().stats().routed == 1);
        n.run_until_quiescent(Timestamp(60_000));
        assert!(n.is_quiescent());
    }

    #[test]
    fn qos2_lossy_exactly_once() {
        let mut n = net(LinkProfile::lossy(0.3, 0.1));
        for i in 0..300u32 {
            n.publish(
                "pub",
                TopicPath::new("t").unwrap(),
                i.to_be_bytes().to_vec(),
                QoS::ExactlyOnce,
            );
        }
        n.run_until_quiescent(Timestamp(10_000_000));
        let mut got: Vec<u32> = n
            .take_delivered("sub")
            .into_iter()
            .map(|(_, m)| u32::from_be_bytes(m.payload.try_into().unwrap()))
            .collect();
        got.sort();
        assert_eq!(got, (0..300).collect::<Vec<_>>());
    }
}
