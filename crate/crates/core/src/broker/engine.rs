//! Sans-IO broker: sessions, routing, authorization hooks, retransmission.
//!
//! The broker never touches a socket. Callers feed it packets and clock
//! ticks and carry out the returned [`TransportAction`]s, which lets the same
//! code run under the in-memory lossy transport and behind TCP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::packet::{ConnectReturnCode, Packet, Publish, QoS};
use super::session::{Inbound, Message, Outbound, ProtocolViolation, RetryPolicy};
use super::topic::{match_filter, TopicFilter, TopicPath};
use crate::identity::{Access, Action, Resource, SigningKey, Token};
use crate::time::{Millis, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrokerConfig {
    pub retransmit_timeout_ms: i64,
    pub max_retries: u32,
    pub max_inflight: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            retransmit_timeout_ms: 5_000,
            max_retries: 8,
            max_inflight: 100,
        }
    }
}

impl BrokerConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retransmit_timeout: Millis(self.retransmit_timeout_ms),
            max_retries: self.max_retries,
            max_inflight: self.max_inflight,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub client_id: String,
    pub access: Access,
    pub outbound: Outbound,
    pub inbound: Inbound,
    pub subscriptions: Vec<(TopicFilter, QoS)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFailed {
    pub broker: String,
    pub client_id: String,
    pub packet_id: u16,
    pub topic: String,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportAction {
    Send { client_id: String, packet: Packet },
    Close { client_id: String, reason: String },
    SessionFailed(SessionFailed),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("client {0:?} has no session")]
    NotConnected(String),
    #[error("client {0:?} already connected")]
    AlreadyConnected(String),
    #[error("not authorized: {0}")]
    NotAuthorized(String),
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
    #[error("client {client_id:?}: {violation}")]
    ProtocolViolation {
        client_id: String,
        violation: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishOutcome {
    /// Sessions the message was routed to.
    pub matched: usize,
    pub actions: Vec<TransportAction>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerStats {
    pub published: u64,
    pub routed: u64,
    pub denied_publishes: u64,
    pub denied_deliveries: u64,
    pub sessions_failed: u64,
    pub protocol_violations: u64,
}

/// Verifies bearer tokens presented as the CONNECT password.
#[derive(Debug, Clone)]
pub struct TokenAuth {
    pub key: SigningKey,
    pub skew: Millis,
}

#[derive(Debug)]
pub struct Broker {
    name: String,
    cfg: BrokerConfig,
    sessions: BTreeMap<String, SessionState>,
    auth: Option<TokenAuth>,
    last_tick: Timestamp,
    stats: BrokerStats,
}

impl Broker {
    pub fn new(name: impl Into<String>, cfg: BrokerConfig) -> Self {
        Broker {
            name: name.into(),
            cfg,
            sessions: BTreeMap::new(),
            auth: None,
            last_tick: Timestamp(i64::MIN),
            stats: BrokerStats::default(),
        }
    }

    pub fn with_token_auth(mut self, auth: TokenAuth) -> Self {
        self.auth = Some(auth);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> BrokerStats {
        self.stats
    }

    pub fn session(&self, client_id: &str) -> Option<&SessionState> {
        self.sessions.get(client_id)
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.sessions.contains_key(client_id)
    }

    pub fn inflight_count(&self) -> usize {
        self.sessions
            .values()
            .map(|s| s.outbound.inflight().len() + s.outbound.pending_len())
            .sum()
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.sessions
            .values()
            .filter_map(|s| s.outbound.next_deadline())
            .min()
    }

    /// Opens a session for an already-authenticated client.
    pub fn attach(
        &mut self,
        client_id: &str,
        access: Access,
    ) -> Result<Vec<TransportAction>, BrokerError> {
        if self.sessions.contains_key(client_id) {
            return Err(BrokerError::AlreadyConnected(client_id.to_owned()));
        }
        self.sessions.insert(
            client_id.to_owned(),
            SessionState {
                client_id: client_id.to_owned(),
                access,
                outbound: Outbound::new(self.cfg.retry_policy()),
                inbound: Inbound::default(),
                subscriptions: Vec::new(),
            },
        );
        Ok(vec![TransportAction::Send {
            client_id: client_id.to_owned(),
            packet: Packet::ConnAck {
                session_present: false,
                code: ConnectReturnCode::Accepted,
            },
        }])
    }

    pub fn detach(&mut self, client_id: &str) -> bool {
        self.sessions.remove(client_id).is_some()
    }

    fn refuse(client_id: &str, code: ConnectReturnCode, reason: &str) -> Vec<TransportAction> {
        vec![
            TransportAction::Send {
                client_id: client_id.to_owned(),
                packet: Packet::ConnAck {
                    session_present: false,
                    code,
                },
            },
            TransportAction::Close {
                client_id: client_id.to_owned(),
                reason: reason.to_owned(),
            },
        ]
    }

    fn violation(&mut self, client_id: &str, v: impl ToString) -> BrokerError {
        self.sessions.remove(client_id);
        self.stats.protocol_violations += 1;
        BrokerError::ProtocolViolation {
            client_id: client_id.to_owned(),
            violation: v.to_string(),
        }
    }

    /// Processes one packet from `client_id`. A protocol violation removes
    /// the session and is returned as an error; the caller closes the link.
    pub fn handle_packet(
        &mut self,
        client_id: &str,
        packet: Packet,
        now: Timestamp,
    ) -> Result<Vec<TransportAction>, BrokerError> {
        if let Packet::Connect(c) = &packet {
            if self.sessions.contains_key(client_id) {
                return Err(self.violation(client_id, "second CONNECT"));
            }
            let access = match &self.auth {
                None => return Err(BrokerError::NotAuthorized("no authenticator".into())),
                Some(auth) => {
                    let Some(pw) = &c.password else {
                        return Ok(Self::refuse(client_id, ConnectReturnCode::NotAuthorized, "no token"));
                    };
                    let verified = std::str::from_utf8(pw)
                        .ok()
                        .and_then(|s| Token::from_bearer(s).ok())
                        .map(|t| t.verify_access(now, &auth.key, auth.skew));
                    match verified {
                        Some(Ok(access)) => access,
                        _ => {
                            return Ok(Self::refuse(
                                client_id,
                                ConnectReturnCode::BadCredentials,
                                "token rejected",
                            ))
                        }
                    }
                }
            };
            return self.attach(client_id, access);
        }

        if !self.sessions.contains_key(client_id) {
            return Err(BrokerError::NotConnected(client_id.to_owned()));
        }

        match packet {
            Packet::Publish(p) => {
                let session = self.sessions.get_mut(client_id).expect("checked");
                let outcome = session.inbound.on_publish(&p);
                let mut actions: Vec<TransportAction> = outcome
                    .reply
                    .into_iter()
                    .map(|packet| TransportAction::Send {
                        client_id: client_id.to_owned(),
                        packet,
                    })
                    .collect();
                if outcome.deliver {
                    match self.publish(client_id, &p.topic, &p.payload, p.qos, now) {
                        Ok(o) => actions.extend(o.actions),
                        // MQTT 3.1.1 has no negative publish ack; the message is dropped
                        Err(BrokerError::NotAuthorized(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                Ok(actions)
            }
            Packet::PubAck(id) => self.ack(client_id, now, |o| o.on_puback(id, now)),
            Packet::PubRec(id) => self.ack(client_id, now, |o| o.on_pubrec(id, now)),
            Packet::PubComp(id) => self.ack(client_id, now, |o| o.on_pubcomp(id, now)),
            Packet::PubRel(id) => {
                let session = self.sessions.get_mut(client_id).expect("checked");
                match session.inbound.on_pubrel(id) {
                    Ok(reply) => Ok(vec![TransportAction::Send {
                        client_id: client_id.to_owned(),
                        packet: reply,
                    }]),
                    Err(v) => Err(self.violation(client_id, v)),
                }
            }
            Packet::Subscribe { packet_id, filters } => {
                let codes = self.subscribe(client_id, &filters)?;
                Ok(vec![TransportAction::Send {
                    client_id: client_id.to_owned(),
                    packet: Packet::SubAck { packet_id, codes },
                }])
            }
            Packet::PingReq => Ok(vec![TransportAction::Send {
                client_id: client_id.to_owned(),
                packet: Packet::PingResp,
            }]),
            Packet::Disconnect => {
                self.sessions.remove(client_id);
                Ok(vec![TransportAction::Close {
                    client_id: client_id.to_owned(),
                    reason: "disconnect".into(),
                }])
            }
            other => Err(self.violation(client_id, format!("unexpected {:?}", other.kind()))),
        }
    }

    fn ack<F>(&mut self, client_id: &str, _now: Timestamp, f: F) -> Result<Vec<TransportAction>, BrokerError>
    where
        F: FnOnce(&mut Outbound) -> Result<Vec<Packet>, ProtocolViolation>,
    {
        let session = self.sessions.get_mut(client_id).expect("checked");
        match f(&mut session.outbound) {
            Ok(packets) => Ok(packets
                .into_iter()
                .map(|packet| TransportAction::Send {
                    client_id: client_id.to_owned(),
                    packet,
                })
                .collect()),
            Err(v) => Err(self.violation(client_id, v)),
        }
    }

    /// Registers subscriptions. A filter is granted when at least one topic
    /// it can match is authorized; deliveries are still checked per topic.
    pub fn subscribe(
        &mut self,
        client_id: &str,
        filters: &[(TopicFilter, QoS)],
    ) -> Result<Vec<Option<QoS>>, BrokerError> {
        let session = self
            .sessions
            .get_mut(client_id)
            .ok_or_else(|| BrokerError::NotConnected(client_id.to_owned()))?;
        let mut codes = Vec::with_capacity(filters.len());
        for (filter, qos) in filters {
            if session.access.may_overlap(Action::Subscribe, filter) {
                session.subscriptions.retain(|(f, _)| f != filter);
                session.subscriptions.push((filter.clone(), *qos));
                codes.push(Some(*qos));
            } else {
                codes.push(None);
            }
        }
        Ok(codes)
    }

    /// Authorizes and routes an application message from `from` to every
    /// session with a matching, authorized subscription. Each receiving
    /// session gets one copy at min(publish QoS, highest matching
    /// subscription QoS).
    pub fn publish(
        &mut self,
        from: &str,
        topic: &TopicPath,
        payload: &[u8],
        qos: QoS,
        now: Timestamp,
    ) -> Result<PublishOutcome, BrokerError> {
        let publisher = self
            .sessions
            .get(from)
            .ok_or_else(|| BrokerError::NotConnected(from.to_owned()))?;
        if let crate::identity::Decision::Deny(reason) =
            publisher.access.authorize(Action::Publish, Resource::Topic(topic))
        {
            self.stats.denied_publishes += 1;
            return Err(BrokerError::NotAuthorized(reason));
        }
        self.stats.published += 1;
        let mut actions = Vec::new();
        let mut matched = 0;
        for session in self.sessions.values_mut() {
            let Some(sub_qos) = session
                .subscriptions
                .iter()
                .filter(|(f, _)| match_filter(f, topic))
                .map(|(_, q)| *q)
                .max()
            else {
                continue;
            };
            if !session
                .access
                .authorize(Action::Subscribe, Resource::Topic(topic))
                .is_allow()
            {
                self.stats.denied_deliveries += 1;
                continue;
            }
            matched += 1;
            self.stats.routed += 1;
            let message = Message {
                topic: topic.clone(),
                payload: payload.to_vec(),
                qos: qos.min(sub_qos),
            };
            if let Some(packet) = session.outbound.enqueue(message, now) {
                actions.push(TransportAction::Send {
                    client_id: session.client_id.clone(),
                    packet,
                });
            }
        }
        Ok(PublishOutcome { matched, actions })
    }

    /// Retransmits expired inflight entries. A session whose entry is past
    /// `max_retries` is failed: closed, with a [`SessionFailed`] event.
    pub fn tick(&mut self, now: Timestamp) -> Vec<TransportAction> {
        let now = now.max(self.last_tick);
        self.last_tick = now;
        let mut actions = Vec::new();
        let mut failed = Vec::new();
        for session in self.sessions.values_mut() {
            let out = session.outbound.tick(now);
            for packet in out.resend {
                actions.push(TransportAction::Send {
                    client_id: session.client_id.clone(),
                    packet,
                });
            }
            if let Some((packet_id, message)) = out.failed.into_iter().next() {
                failed.push(SessionFailed {
                    broker: self.name.clone(),
                    client_id: session.client_id.clone(),
                    packet_id,
                    topic: message.topic.to_string(),
                    at: now,
                });
            }
        }
        for f in failed {
            self.sessions.remove(&f.client_id);
            self.stats.sessions_failed += 1;
            actions.push(TransportAction::Close {
                client_id: f.client_id.clone(),
                reason: "retries exhausted".into(),
            });
            actions.push(TransportAction::SessionFailed(f));
        }
        actions
    }
}

/// Convenience for tests and the service: the PUBLISH a client sends.
pub fn publish_packet(topic: &TopicPath, payload: &[u8], qos: QoS, packet_id: u16) -> Packet {
    Packet::Publish(Publish {
        topic: topic.clone(),
        packet_id,
        qos,
        dup: false,
        payload: payload.to_vec(),
    })
}
