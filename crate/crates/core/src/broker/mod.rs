//! MQTT 3.1.1 subset broker used for both the ingestion and the core broker.

pub mod client;
pub mod engine;
pub mod net;
pub mod packet;
pub mod session;
pub mod topic;
pub mod transport;

pub use client::{Client, ClientOutput};
pub use engine::{
    publish_packet, Broker, BrokerConfig, BrokerError, BrokerStats, PublishOutcome, SessionFailed,
    SessionState, TokenAuth, TransportAction,
};
pub use net::{LocalNet, NetEvent};
pub use packet::{decode_packet, encode_packet, try_decode, Connect, ConnectReturnCode, DecodeError, EncodeError, Packet, PacketKind, Publish, QoS};
pub use session::{Inbound, Message, Outbound, Phase, ProtocolViolation, RetryPolicy};
pub use topic::{match_filter, TopicError, TopicFilter, TopicPath};
pub use transport::{LinkProfile, LossyTransport, TransportStats, BROKER};
