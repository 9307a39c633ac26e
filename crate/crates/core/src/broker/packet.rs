//! MQTT 3.1.1 wire subset: CONNECT, CONNACK, PUBLISH, PUBACK, PUBREC,
//! PUBREL, PUBCOMP, SUBSCRIBE, SUBACK, PINGREQ, PINGRESP, DISCONNECT.
//!
//! Wills, retained messages and MQTT 5 properties are not supported. A
//! PUBLISH arriving with the retain bit set is accepted and the bit dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::topic::{TopicError, TopicFilter, TopicPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<QoS> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            2 => Some(QoS::ExactlyOnce),
            _ => None,
        }
    }
}

impl TryFrom<u8> for QoS {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        QoS::from_u8(v).ok_or_else(|| format!("invalid QoS level {v}"))
    }
}

impl From<QoS> for u8 {
    fn from(q: QoS) -> u8 {
        q as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub username: Option<String>,
    /// Carries the bearer token on platform brokers.
    pub password: Option<Vec<u8>>,
    pub keep_alive: u16,
    pub clean_session: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectReturnCode {
    Accepted = 0,
    UnacceptableProtocol = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadCredentials = 4,
    NotAuthorized = 5,
}

impl ConnectReturnCode {
    fn from_u8(v: u8) -> Option<Self> {
        use ConnectReturnCode::*;
        Some(match v {
            0 => Accepted,
            1 => UnacceptableProtocol,
            2 => IdentifierRejected,
            3 => ServerUnavailable,
            4 => BadCredentials,
            5 => NotAuthorized,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: TopicPath,
    /// Zero for QoS 0; non-zero otherwise.
    pub packet_id: u16,
    pub qos: QoS,
    pub dup: bool,
    pub payload: Vec<u8>,
}

/// SUBACK return code: the granted QoS, or `None` for failure (0x80).
pub type SubAckCode = Option<QoS>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck {
        session_present: bool,
        code: ConnectReturnCode,
    },
    Publish(Publish),
    PubAck(u16),
    PubRec(u16),
    PubRel(u16),
    PubComp(u16),
    Subscribe {
        packet_id: u16,
        filters: Vec<(TopicFilter, QoS)>,
    },
    SubAck {
        packet_id: u16,
        codes: Vec<SubAckCode>,
    },
    PingReq,
    PingResp,
    Disconnect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PacketKind {
    Connect,
    ConnAck,
    Publish,
    PubAck,
    PubRec,
    PubRel,
    PubComp,
    Subscribe,
    SubAck,
    PingReq,
    PingResp,
    Disconnect,
}

impl Packet {
    pub fn kind(&self) -> PacketKind {
        match self {
            Packet::Connect(_) => PacketKind::Connect,
            Packet::ConnAck { .. } => PacketKind::ConnAck,
            Packet::Publish(_) => PacketKind::Publish,
            Packet::PubAck(_) => PacketKind::PubAck,
            Packet::PubRec(_) => PacketKind::PubRec,
            Packet::PubRel(_) => PacketKind::PubRel,
            Packet::PubComp(_) => PacketKind::PubComp,
            Packet::Subscribe { .. } => PacketKind::Subscribe,
            Packet::SubAck { .. } => PacketKind::SubAck,
            Packet::PingReq => PacketKind::PingReq,
            Packet::PingResp => PacketKind::PingResp,
            Packet::Disconnect => PacketKind::Disconnect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("QoS>0 publish requires a non-zero packet id")]
    ZeroPacketId,
    #[error("QoS 0 publish cannot carry a packet id or dup flag")]
    QoS0Identified,
    #[error("password requires a username")]
    PasswordWithoutUsername,
    #[error("{0} longer than 65535 bytes")]
    FieldTooLong(&'static str),
    #[error("packet exceeds maximum remaining length")]
    TooLarge,
    #[error("subscribe/suback must carry at least one entry")]
    EmptyList,
    #[error("invalid client identifier")]
    InvalidClientId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame incomplete: need more bytes")]
    Incomplete,
    #[error("malformed packet: {0}")]
    Malformed(String),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, DecodeError> {
    Err(DecodeError::Malformed(msg.into()))
}

const MAX_REMAINING: usize = 268_435_455;

fn put_remaining_length(out: &mut Vec<u8>, mut len: usize) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if len == 0 {
            break;
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &'static str) -> Result<(), EncodeError> {
    put_bytes(out, s.as_bytes(), what)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8], what: &'static str) -> Result<(), EncodeError> {
    let len = u16::try_from(b.len()).map_err(|_| EncodeError::FieldTooLong(what))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

fn valid_client_id(id: &str) -> bool {
    !id.contains('\0')
}

/// Serializes a packet, enforcing the invariants the wire format relies on.
pub fn encode_packet(p: &Packet) -> Result<Vec<u8>, EncodeError> {
    let mut body = Vec::new();
    let header: u8 = match p {
        Packet::Connect(c) => {
            if c.password.is_some() && c.username.is_none() {
                return Err(EncodeError::PasswordWithoutUsername);
            }
            if !valid_client_id(&c.client_id) {
                return Err(EncodeError::InvalidClientId);
            }
            put_str(&mut body, "MQTT", "protocol name")?;
            body.push(4);
            let mut flags = 0u8;
            if c.username.is_some() {
                flags |= 0x80;
            }
            if c.password.is_some() {
                flags |= 0x40;
            }
            if c.clean_session {
                flags |= 0x02;
            }
            body.push(flags);
            body.extend_from_slice(&c.keep_alive.to_be_bytes());
            put_str(&mut body, &c.client_id, "client id")?;
            if let Some(u) = &c.username {
                put_str(&mut body, u, "username")?;
            }
            if let Some(pw) = &c.password {
                put_bytes(&mut body, pw, "password")?;
            }
            0x10
        }
        Packet::ConnAck {
            session_present,
            code,
        } => {
            body.push(u8::from(*session_present));
            body.push(*code as u8);
            0x20
        }
        Packet::Publish(p) => {
            match p.qos {
                QoS::AtMostOnce if p.packet_id != 0 || p.dup => {
                    return Err(EncodeError::QoS0Identified)
                }
                QoS::AtLeastOnce | QoS::ExactlyOnce if p.packet_id == 0 => {
                    return Err(EncodeError::ZeroPacketId)
                }
                _ => {}
            }
            put_str(&mut body, p.topic.as_str(), "topic")?;
            if p.qos != QoS::AtMostOnce {
                body.extend_from_slice(&p.packet_id.to_be_bytes());
            }
            body.extend_from_slice(&p.payload);
            0x30 | (u8::from(p.dup) << 3) | ((p.qos as u8) << 1)
        }
        Packet::PubAck(id) | Packet::PubRec(id) | Packet::PubRel(id) | Packet::PubComp(id) => {
            if *id == 0 {
                return Err(EncodeError::ZeroPacketId);
            }
            body.extend_from_slice(&id.to_be_bytes());
            match p {
                Packet::PubAck(_) => 0x40,
                Packet::PubRec(_) => 0x50,
                Packet::PubRel(_) => 0x62,
                _ => 0x70,
            }
        }
        Packet::Subscribe { packet_id, filters } => {
            if *packet_id == 0 {
                return Err(EncodeError::ZeroPacketId);
            }
            if filters.is_empty() {
                return Err(EncodeError::EmptyList);
            }
            body.extend_from_slice(&packet_id.to_be_bytes());
            for (filter, qos) in filters {
                put_str(&mut body, filter.as_str(), "topic filter")?;
                body.push(*qos as u8);
            }
            0x82
        }
        Packet::SubAck { packet_id, codes } => {
            if *packet_id == 0 {
                return Err(EncodeError::ZeroPacketId);
            }
            if codes.is_empty() {
                return Err(EncodeError::EmptyList);
            }
            body.extend_from_slice(&packet_id.to_be_bytes());
            body.extend(codes.iter().map(|c| c.map_or(0x80, |q| q as u8)));
            0x90
        }
        Packet::PingReq => 0xC0,
        Packet::PingResp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    if body.len() > MAX_REMAINING {
        return Err(EncodeError::TooLarge);
    }
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(header);
    put_remaining_length(&mut out, body.len());
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| DecodeError::Malformed("unexpected end of packet".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        if self.remaining() < len {
            return malformed("length-prefixed field overruns packet");
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let raw = self.bytes()?;
        let s = std::str::from_utf8(raw)
            .map_err(|_| DecodeError::Malformed("string is not UTF-8".into()))?;
        if s.contains('\0') {
            return malformed("string contains U+0000");
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return malformed("trailing bytes in packet");
        }
        Ok(())
    }
}

fn topic_err(e: TopicError) -> DecodeError {
    DecodeError::Malformed(format!("bad topic: {e}"))
}

/// Attempts to decode one packet from the front of `buf`.
///
/// Returns `Incomplete` when `buf` holds a valid prefix of a frame, so the
/// caller can read more bytes; otherwise the packet and bytes consumed.
pub fn try_decode(buf: &[u8]) -> Result<(Packet, usize), DecodeError> {
    let Some(&first) = buf.first() else {
        return Err(DecodeError::Incomplete);
    };
    let mut len: usize = 0;
    let mut multiplier: usize = 1;
    let mut idx = 1;
    loop {
        let Some(&b) = buf.get(idx) else {
            return Err(DecodeError::Incomplete);
        };
        len += (b & 0x7F) as usize * multiplier;
        idx += 1;
        if b & 0x80 == 0 {
            break;
        }
        if idx > 4 {
            return malformed("remaining length longer than 4 bytes");
        }
        multiplier *= 128;
    }
    let total = idx + len;
    if buf.len() < total {
        return Err(DecodeError::Incomplete);
    }
    let packet = decode_body(first, &buf[idx..total])?;
    Ok((packet, total))
}

/// Decodes exactly one complete frame. Truncated input is malformed here.
pub fn decode_packet(buf: &[u8]) -> Result<Packet, DecodeError> {
    match try_decode(buf) {
        Ok((p, used)) if used == buf.len() => Ok(p),
        Ok(_) => malformed("trailing bytes after frame"),
        Err(DecodeError::Incomplete) => malformed("truncated frame"),
        Err(e) => Err(e),
    }
}

fn decode_body(first: u8, body: &[u8]) -> Result<Packet, DecodeError> {
    let ptype = first >> 4;
    let flags = first & 0x0F;
    let mut r = Reader { buf: body, pos: 0 };
    let expect_flags = |want: u8| -> Result<(), DecodeError> {
        if flags != want {
            malformed(format!("invalid fixed-header flags {flags:#x} for type {ptype}"))
        } else {
            Ok(())
        }
    };
    let packet = match ptype {
        1 => {
            expect_flags(0)?;
            if r.string()? != "MQTT" {
                return malformed("unsupported protocol name");
            }
            if r.u8()? != 4 {
                return malformed("unsupported protocol level");
            }
            let cf = r.u8()?;
            if cf & 0x01 != 0 {
                return malformed("reserved connect flag set");
            }
            if cf & 0x04 != 0 || cf & 0x38 != 0 {
                return malformed("will messages not supported");
            }
            let has_user = cf & 0x80 != 0;
            let has_pass = cf & 0x40 != 0;
            if has_pass && !has_user {
                return malformed("password flag without username flag");
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            let username = if has_user { Some(r.string()?) } else { None };
            let password = if has_pass {
                Some(r.bytes()?.to_vec())
            } else {
                None
            };
            r.finish()?;
            Packet::Connect(Connect {
                client_id,
                username,
                password,
                keep_alive,
                clean_session: cf & 0x02 != 0,
            })
        }
        2 => {
            expect_flags(0)?;
            let ack = r.u8()?;
            if ack & 0xFE != 0 {
                return malformed("reserved connack flags set");
            }
            let code = ConnectReturnCode::from_u8(r.u8()?)
                .ok_or_else(|| DecodeError::Malformed("unknown connack code".into()))?;
            r.finish()?;
            Packet::ConnAck {
                session_present: ack & 1 != 0,
                code,
            }
        }
        3 => {
            let dup = flags & 0x08 != 0;
            let qos = QoS::from_u8((flags >> 1) & 0x03)
                .ok_or_else(|| DecodeError::Malformed("publish QoS 3".into()))?;
            if qos == QoS::AtMostOnce && dup {
                return malformed("dup flag on QoS 0 publish");
            }
            let topic = TopicPath::new(r.string()?).map_err(topic_err)?;
            let packet_id = if qos == QoS::AtMostOnce {
                0
            } else {
                let id = r.u16()?;
                if id == 0 {
                    return malformed("zero packet id on QoS>0 publish");
                }
                id
            };
            let payload = r.rest().to_vec();
            Packet::Publish(Publish {
                topic,
                packet_id,
                qos,
                dup,
                payload,
            })
        }
        4..=7 => {
            expect_flags(if ptype == 6 { 0x02 } else { 0 })?;
            let id = r.u16()?;
            if id == 0 {
                return malformed("zero packet id");
            }
            r.finish()?;
            match ptype {
                4 => Packet::PubAck(id),
                5 => Packet::PubRec(id),
                6 => Packet::PubRel(id),
                _ => Packet::PubComp(id),
            }
        }
        8 => {
            expect_flags(0x02)?;
            let packet_id = r.u16()?;
            if packet_id == 0 {
                return malformed("zero packet id");
            }
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let filter = TopicFilter::new(r.string()?).map_err(topic_err)?;
                let q = r.u8()?;
                let qos = QoS::from_u8(q)
                    .ok_or_else(|| DecodeError::Malformed("invalid requested QoS".into()))?;
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return malformed("subscribe without filters");
            }
            Packet::Subscribe { packet_id, filters }
        }
        9 => {
            expect_flags(0)?;
            let packet_id = r.u16()?;
            if packet_id == 0 {
                return malformed("zero packet id");
            }
            let mut codes = Vec::new();
            while r.remaining() > 0 {
                codes.push(match r.u8()? {
                    0x80 => None,
                    q => Some(
                        QoS::from_u8(q)
                            .ok_or_else(|| DecodeError::Malformed("invalid suback code".into()))?,
                    ),
                });
            }
            if codes.is_empty() {
                return malformed("suback without codes");
            }
            Packet::SubAck { packet_id, codes }
        }
        12 | 13 | 14 => {
            expect_flags(0)?;
            r.finish()?;
            match ptype {
                12 => Packet::PingReq,
                13 => Packet::PingResp,
                _ => Packet::Disconnect,
            }
        }
        other => return malformed(format!("unsupported packet type {other}")),
    };
    Ok(packet)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn publish(qos: QoS, id: u16) -> Packet {
        Packet::Publish(Publish {
            topic: TopicPath::new("a/b").unwrap(),
            packet_id: id,
            qos,
            dup: false,
            payload: b"x".to_vec(),
        })
    }

    #[test]
    fn publish_matches_hand_assembled_frame() {
        // fixed header 0x32 (PUBLISH, QoS1), remaining length 8,
        // topic "a/b" (00 03 61 2f 62), packet id 7 (00 07), payload "x"
        let reference = [0x32, 0x08, 0x00, 0x03, b'a', b'/', b'b', 0x00, 0x07, b'x'];
        let bytes = encode_packet(&publish(QoS::AtLeastOnce, 7)).unwrap();
        assert_eq!(bytes, reference);
        assert_eq!(decode_packet(&reference).unwrap(), publish(QoS::AtLeastOnce, 7));
    }

    #[test]
    fn connect_matches_hand_assembled_frame() {
        let p = Packet::Connect(Connect {
            client_id: "c".into(),
            username: Some("u".into()),
            password: Some(b"pw".to_vec()),
            keep_alive: 60,
            clean_session: true,
        });
        // var header 10 bytes + "c" (3) + "u" (3) + "pw" (4) = 20
        let reference = [
            0x10, 0x14, 0x00, 0x04, b'M', b'Q', b'T', b'T', 0x04, 0xC2, 0x00, 0x3C, 0x00, 0x01,
            b'c', 0x00, 0x01, b'u', 0x00, 0x02, b'p', b'w',
        ];
        assert_eq!(encode_packet(&p).unwrap(), reference);
        assert_eq!(decode_packet(&reference).unwrap(), p);
    }

    #[test]
    fn truncated_fixed_header_is_malformed() {
        assert!(matches!(decode_packet(&[0x32]), Err(DecodeError::Malformed(_))));
        assert!(matches!(decode_packet(&[]), Err(DecodeError::Malformed(_))));
        assert_eq!(try_decode(&[0x32]), Err(DecodeError::Incomplete));
    }

    #[test]
    fn zero_packet_id_rejected_on_encode() {
        assert_eq!(
            encode_packet(&publish(QoS::AtLeastOnce, 0)),
            Err(EncodeError::ZeroPacketId)
        );
        assert_eq!(
            encode_packet(&publish(QoS::AtMostOnce, 3)),
            Err(EncodeError::QoS0Identified)
        );
    }

    #[test]
    fn pubrel_requires_reserved_flags() {
        assert!(decode_packet(&[0x60, 0x02, 0x00, 0x01]).is_err());
        assert_eq!(decode_packet(&[0x62, 0x02, 0x00, 0x01]).unwrap(), Packet::PubRel(1));
    }

    #[test]
    fn multi_byte_remaining_length() {
        let Packet::Publish(mut p) = publish(QoS::AtMostOnce, 0) else {
            unreachable!()
        };
        p.payload = vec![7; 300];
        let bytes = encode_packet(&Packet::Publish(p.clone())).unwrap();
        assert_eq!(&bytes[1..3], &[0xB1, 0x02]); // 305 = 0x31 + 2*128
        assert_eq!(decode_packet(&bytes).unwrap(), Packet::Publish(p));
    }

    #[test]
    fn stream_decoding_consumes_frames() {
        let mut buf = encode_packet(&Packet::PingReq).unwrap();
        buf.extend(encode_packet(&Packet::PubAck(9)).unwrap());
        let (a, n) = try_decode(&buf).unwrap();
        assert_eq!(a, Packet::PingReq);
        let (b, m) = try_decode(&buf[n..]).unwrap();
        assert_eq!(b, Packet::PubAck(9));
        assert_eq!(n + m, buf.len());
    }

    #[test]
    fn will_flag_rejected() {
        let mut bytes = encode_packet(&Packet::Connect(Connect {
            client_id: "c".into(),
            username: None,
            password: None,
            keep_alive: 0,
            clean_session: true,
        }))
        .unwrap();
        bytes[9] |= 0x04;
        assert!(decode_packet(&bytes).is_err());
    }
}
