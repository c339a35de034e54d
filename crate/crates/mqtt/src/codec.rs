//! Encoder and decoder for the MQTT 3.1.1 control packets the system speaks.
//!
//! Supported: CONNECT, CONNACK, PUBLISH (QoS 0/1), PUBACK, SUBSCRIBE, SUBACK,
//! UNSUBSCRIBE, UNSUBACK, PINGREQ, PINGRESP, DISCONNECT. QoS 2 flows, will
//! messages and username/password authentication are rejected at decode so
//! that unsupported features fail loudly instead of being silently ignored.

use bytes::{BufMut, Bytes, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topic;

/// Largest value the variable-length scheme can carry.
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;

/// Default cap on the remaining length accepted by [`Decoder`].
pub const DEFAULT_MAX_PACKET_BYTES: usize = 262_144;

const PROTOCOL_NAME: &str = "MQTT";
const PROTOCOL_LEVEL: u8 = 4;
const MAX_STRING_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PacketType {
    Connect = 1,
    Connack = 2,
    Publish = 3,
    Puback = 4,
    Subscribe = 8,
    Suback = 9,
    Unsubscribe = 10,
    Unsuback = 11,
    Pingreq = 12,
    Pingresp = 13,
    Disconnect = 14,
}

/// Quality of service. `ExactlyOnce` only ever appears as a requested level
/// inside SUBSCRIBE; PUBLISH packets carrying it are malformed here.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub enum QoS {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl QoS {
    pub fn from_u8(value: u8) -> Option<QoS> {
        match value {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            2 => Some(QoS::ExactlyOnce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectReturnCode {
    Accepted = 0,
    UnacceptableProtocolVersion = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadUsernameOrPassword = 4,
    NotAuthorized = 5,
}

impl ConnectReturnCode {
    fn from_u8(value: u8) -> Option<Self> {
        use ConnectReturnCode::*;
        Some(match value {
            0 => Accepted,
            1 => UnacceptableProtocolVersion,
            2 => IdentifierRejected,
            3 => ServerUnavailable,
            4 => BadUsernameOrPassword,
            5 => NotAuthorized,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubackCode {
    Granted(QoS),
    Failure,
}

impl SubackCode {
    fn to_u8(self) -> u8 {
        match self {
            SubackCode::Granted(qos) => qos as u8,
            SubackCode::Failure => 0x80,
        }
    }

    fn from_u8(value: u8) -> Option<Self> {
        match value {
            0x80 => Some(SubackCode::Failure),
            v => QoS::from_u8(v).map(SubackCode::Granted),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub clean_session: bool,
    pub keep_alive: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connack {
    pub session_present: bool,
    pub code: ConnectReturnCode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// Present iff `qos` is `AtLeastOnce`.
    pub packet_id: Option<u16>,
    pub payload: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    pub filters: Vec<(String, QoS)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Suback {
    pub packet_id: u16,
    pub codes: Vec<SubackCode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unsubscribe {
    pub packet_id: u16,
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    Connack(Connack),
    Publish(Publish),
    Puback { packet_id: u16 },
    Subscribe(Subscribe),
    Suback(Suback),
    Unsubscribe(Unsubscribe),
    Unsuback { packet_id: u16 },
    Pingreq,
    Pingresp,
    Disconnect,
}

impl Packet {
    pub fn packet_type(&self) -> PacketType {
        match self {
            Packet::Connect(_) => PacketType::Connect,
            Packet::Connack(_) => PacketType::Connack,
            Packet::Publish(_) => PacketType::Publish,
            Packet::Puback { .. } => PacketType::Puback,
            Packet::Subscribe(_) => PacketType::Subscribe,
            Packet::Suback(_) => PacketType::Suback,
            Packet::Unsubscribe(_) => PacketType::Unsubscribe,
            Packet::Unsuback { .. } => PacketType::Unsuback,
            Packet::Pingreq => PacketType::Pingreq,
            Packet::Pingresp => PacketType::Pingresp,
            Packet::Disconnect => PacketType::Disconnect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid packet field `{field}`: {reason}")]
pub struct EncodeError {
    pub field: &'static str,
    pub reason: String,
}

impl EncodeError {
    fn new(field: &'static str, reason: impl Into<String>) -> Self {
        EncodeError {
            field,
            reason: reason.into(),
        }
    }
}

/// Decode failures are fatal for the connection that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("remaining length {length} exceeds the limit of {limit} bytes")]
    TooLarge { length: usize, limit: usize },
}

fn malformed(reason: impl Into<String>) -> DecodeError {
    DecodeError::Malformed(reason.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("remaining length {0} is outside 0..=268435455")]
pub struct LengthOutOfRange(pub usize);

/// Base-128 encoding: seven bits per byte, continuation bit on all but the last.
pub fn encode_remaining_length(n: usize) -> Result<Vec<u8>, LengthOutOfRange> {
    if n > MAX_REMAINING_LENGTH {
        return Err(LengthOutOfRange(n));
    }
    let mut out = Vec::with_capacity(4);
    let mut rest = n;
    loop {
        let mut byte = (rest % 128) as u8;
        rest /= 128;
        if rest > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if rest == 0 {
            return Ok(out);
        }
    }
}

/// Returns `Ok(None)` when more bytes are needed, otherwise the value and
/// the number of bytes it occupied. Over-long encodings are rejected.
pub fn decode_remaining_length(bytes: &[u8]) -> Result<Option<(usize, usize)>, DecodeError> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for (i, &byte) in bytes.iter().enumerate() {
        if i == 4 {
            return Err(malformed("remaining length longer than 4 bytes"));
        }
        value += (byte & 0x7F) as usize * multiplier;
        if byte & 0x80 == 0 {
            if i > 0 && byte == 0 {
                return Err(malformed("over-long remaining length encoding"));
            }
            return Ok(Some((value, i + 1)));
        }
        multiplier *= 128;
    }
    if bytes.len() >= 4 {
        return Err(malformed("remaining length longer than 4 bytes"));
    }
    Ok(None)
}

fn put_string(buf: &mut BytesMut, field: &'static str, s: &str) -> Result<(), EncodeError> {
    if s.len() > MAX_STRING_LEN {
        return Err(EncodeError::new(field, "longer than 65535 bytes"));
    }
    if s.contains('\0') {
        return Err(EncodeError::new(field, "contains U+0000"));
    }
    buf.put_u16(s.len() as u16);
    buf.put_slice(s.as_bytes());
    Ok(())
}

fn check_packet_id(id: u16) -> Result<u16, EncodeError> {
    if id == 0 {
        Err(EncodeError::new("packet_id", "must be nonzero"))
    } else {
        Ok(id)
    }
}

fn check_publish_topic(topic_name: &str) -> Result<(), EncodeError> {
    topic::validate_topic_name(topic_name).map_err(|e| EncodeError::new("topic", e.to_string()))
}

/// Encodes `packet` into its unique minimal wire form.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, EncodeError> {
    let mut out = BytesMut::new();
    encode_into(packet, &mut out)?;
    Ok(out.to_vec())
}

pub fn encode_into(packet: &Packet, out: &mut BytesMut) -> Result<(), EncodeError> {
    let mut body = BytesMut::new();
    let first_byte: u8 = match packet {
        Packet::Connect(c) => {
            put_string(&mut body, "protocol_name", PROTOCOL_NAME)?;
            body.put_u8(PROTOCOL_LEVEL);
            body.put_u8(if c.clean_session { 0x02 } else { 0x00 });
            body.put_u16(c.keep_alive);
            put_string(&mut body, "client_id", &c.client_id)?;
            0x10
        }
        Packet::Connack(c) => {
            if c.session_present && c.code != ConnectReturnCode::Accepted {
                return Err(EncodeError::new(
                    "session_present",
                    "must be false when the connection is refused",
                ));
            }
            body.put_u8(c.session_present as u8);
            body.put_u8(c.code as u8);
            0x20
        }
        Packet::Publish(p) => {
            check_publish_topic(&p.topic)?;
            put_string(&mut body, "topic", &p.topic)?;
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, None) => {
                    if p.dup {
                        return Err(EncodeError::new("dup", "must be false for QoS 0"));
                    }
                }
                (QoS::AtLeastOnce, Some(id)) => body.put_u16(check_packet_id(id)?),
                (QoS::ExactlyOnce, _) => return Err(EncodeError::new("qos", "QoS 2 unsupported")),
                (QoS::AtMostOnce, Some(_)) => {
                    return Err(EncodeError::new("packet_id", "must be absent for QoS 0"))
                }
                (QoS::AtLeastOnce, None) => {
                    return Err(EncodeError::new("packet_id", "required for QoS 1"))
                }
            }
            body.put_slice(&p.payload);
            0x30 | ((p.dup as u8) << 3) | ((p.qos as u8) << 1) | p.retain as u8
        }
        Packet::Puback { packet_id } => {
            body.put_u16(check_packet_id(*packet_id)?);
            0x40
        }
        Packet::Subscribe(s) => {
            body.put_u16(check_packet_id(s.packet_id)?);
            if s.filters.is_empty() {
                return Err(EncodeError::new("filters", "at least one filter required"));
            }
            for (filter, qos) in &s.filters {
                if filter.is_empty() {
                    return Err(EncodeError::new("filters", "empty topic filter"));
                }
                put_string(&mut body, "filters", filter)?;
                body.put_u8(*qos as u8);
            }
            0x82
        }
        Packet::Suback(s) => {
            body.put_u16(check_packet_id(s.packet_id)?);
            if s.codes.is_empty() {
                return Err(EncodeError::new("codes", "at least one return code required"));
            }
            for code in &s.codes {
                body.put_u8(code.to_u8());
            }
            0x90
        }
        Packet::Unsubscribe(u) => {
            body.put_u16(check_packet_id(u.packet_id)?);
            if u.filters.is_empty() {
                return Err(EncodeError::new("filters", "at least one filter required"));
            }
            for filter in &u.filters {
                if filter.is_empty() {
                    return Err(EncodeError::new("filters", "empty topic filter"));
                }
                put_string(&mut body, "filters", filter)?;
            }
            0xA2
        }
        Packet::Unsuback { packet_id } => {
            body.put_u16(check_packet_id(*packet_id)?);
            0xB0
        }
        Packet::Pingreq => 0xC0,
        Packet::Pingresp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    let length = encode_remaining_length(body.len())
        .map_err(|e| EncodeError::new("remaining_length", e.to_string()))?;
    out.reserve(1 + length.len() + body.len());
    out.put_u8(first_byte);
    out.put_slice(&length);
    out.put_slice(&body);
    Ok(())
}

/// Stateless decoder with a configurable cap on the remaining length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decoder {
    pub max_remaining_length: usize,
}

impl Default for Decoder {
    fn default() -> Self {
        Decoder {
            max_remaining_length: DEFAULT_MAX_PACKET_BYTES,
        }
    }
}

/// Decodes one packet from the front of `bytes` using the default limit.
///
/// `Ok(None)` means the buffer holds only a prefix of a packet; nothing is
/// consumed in that case.
pub fn decode_packet(bytes: &[u8]) -> Result<Option<(Packet, usize)>, DecodeError> {
    Decoder::default().decode(bytes)
}

impl Decoder {
    pub fn new(max_remaining_length: usize) -> Self {
        Decoder {
            max_remaining_length: max_remaining_length.min(MAX_REMAINING_LENGTH),
        }
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<Option<(Packet, usize)>, DecodeError> {
        let Some(&first) = bytes.first() else {
            return Ok(None);
        };
        // Validate the type nibble before waiting on the rest of the frame.
        validate_first_byte(first)?;
        let Some((length, length_bytes)) = decode_remaining_length(&bytes[1..])? else {
            return Ok(None);
        };
        if length > self.max_remaining_length {
            return Err(DecodeError::TooLarge {
                length,
                limit: self.max_remaining_length,
            });
        }
        let header_len = 1 + length_bytes;
        let total = header_len + length;
        if bytes.len() < total {
            return Ok(None);
        }
        let packet = decode_body(first, &bytes[header_len..total])?;
        Ok(Some((packet, total)))
    }
}

fn validate_first_byte(first: u8) -> Result<(), DecodeError> {
    let kind = first >> 4;
    let flags = first & 0x0F;
    let expected = match kind {
        3 => return Ok(()),
        1 | 2 | 4 | 9 | 11 | 12 | 13 | 14 => 0,
        8 | 10 => 0b0010,
        5..=7 => return Err(malformed("QoS 2 flow packets are unsupported")),
        _ => return Err(malformed(format!("invalid packet type {kind}"))),
    };
    if flags != expected {
        return Err(malformed(format!(
            "reserved flags {flags:#06b} for packet type {kind}"
        )));
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| malformed("truncated packet body"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn packet_id(&mut self) -> Result<u16, DecodeError> {
        match self.u16()? {
            0 => Err(malformed("packet identifier 0")),
            id => Ok(id),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(malformed("truncated packet body"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        let s = std::str::from_utf8(raw).map_err(|_| malformed("string is not valid UTF-8"))?;
        if s.contains('\0') {
            return Err(malformed("string contains U+0000"));
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &'a [u8] {
        let slice = &self.buf[self.pos..];
        self.pos = self.buf.len();
        slice
    }

    fn finish(self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(malformed("trailing bytes in packet body"));
        }
        Ok(())
    }
}

fn decode_body(first: u8, body: &[u8]) -> Result<Packet, DecodeError> {
    let mut r = Reader::new(body);
    let packet = match first >> 4 {
        1 => {
            let name = r.string()?;
            if name != PROTOCOL_NAME {
                return Err(malformed(format!("unsupported protocol name {name:?}")));
            }
            let level = r.u8()?;
            if level != PROTOCOL_LEVEL {
                return Err(malformed(format!("unsupported protocol level {level}")));
            }
            let flags = r.u8()?;
            if flags & 0x01 != 0 {
                return Err(malformed("reserved connect flag set"));
            }
            if flags & 0b1111_1100 != 0 {
                return Err(malformed(
                    "will, username and password are unsupported",
                ));
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            Packet::Connect(Connect {
                client_id,
                clean_session: flags & 0x02 != 0,
                keep_alive,
            })
        }
        2 => {
            let ack_flags = r.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(malformed("reserved connack flags set"));
            }
            let code = ConnectReturnCode::from_u8(r.u8()?)
                .ok_or_else(|| malformed("unknown connack return code"))?;
            let session_present = ack_flags & 1 == 1;
            if session_present && code != ConnectReturnCode::Accepted {
                return Err(malformed("session present on refused connection"));
            }
            Packet::Connack(Connack {
                session_present,
                code,
            })
        }
        3 => {
            let dup = first & 0x08 != 0;
            let retain = first & 0x01 != 0;
            let qos = match (first >> 1) & 0x03 {
                0 => QoS::AtMostOnce,
                1 => QoS::AtLeastOnce,
                2 => return Err(malformed("PUBLISH with QoS 2 is unsupported")),
                _ => return Err(malformed("PUBLISH with QoS 3")),
            };
            if dup && qos == QoS::AtMostOnce {
                return Err(malformed("DUP set on QoS 0 PUBLISH"));
            }
            let topic_name = r.string()?;
            topic::validate_topic_name(&topic_name).map_err(|e| malformed(e.to_string()))?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                _ => Some(r.packet_id()?),
            };
            let payload = Bytes::copy_from_slice(r.rest());
            Packet::Publish(Publish {
                dup,
                qos,
                retain,
                topic: topic_name,
                packet_id,
                payload,
            })
        }
        4 => Packet::Puback {
            packet_id: r.packet_id()?,
        },
        8 => {
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let filter = r.string()?;
                if filter.is_empty() {
                    return Err(malformed("empty topic filter"));
                }
                let requested = r.u8()?;
                let qos = QoS::from_u8(requested)
                    .ok_or_else(|| malformed(format!("requested QoS byte {requested:#04x}")))?;
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return Err(malformed("SUBSCRIBE without filters"));
            }
            Packet::Subscribe(Subscribe { packet_id, filters })
        }
        9 => {
            let packet_id = r.packet_id()?;
            let mut codes = Vec::new();
            while r.remaining() > 0 {
                let raw = r.u8()?;
                codes.push(
                    SubackCode::from_u8(raw)
                        .ok_or_else(|| malformed(format!("SUBACK return code {raw:#04x}")))?,
                );
            }
            if codes.is_empty() {
                return Err(malformed("SUBACK without return codes"));
            }
            Packet::Suback(Suback { packet_id, codes })
        }
        10 => {
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let filter = r.string()?;
                if filter.is_empty() {
                    return Err(malformed("empty topic filter"));
                }
                filters.push(filter);
            }
            if filters.is_empty() {
                return Err(malformed("UNSUBSCRIBE without filters"));
            }
            Packet::Unsubscribe(Unsubscribe { packet_id, filters })
        }
        11 => Packet::Unsuback {
            packet_id: r.packet_id()?,
        },
        12 => Packet::Pingreq,
        13 => Packet::Pingresp,
        14 => Packet::Disconnect,
        other => return Err(malformed(format!("invalid packet type {other}"))),
    };
    r.finish()?;
    Ok(packet)
}
