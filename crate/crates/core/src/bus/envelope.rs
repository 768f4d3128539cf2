//! Binary message envelope shared by the in-process and TCP transports.
//!
//! Layout, all integers big-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 1     | version (= 1) |
//! | 1     | kind: 0 request, 1 reply, 2 event, 3 stream_frame |
//! | 8     | correlation_id |
//! | 8     | sequence (stream frames; bus error code on TCP replies; 0 otherwise) |
//! | 2     | topic/target length `n` |
//! | n     | topic/target, UTF-8 |
//! | 1     | deadline present flag (0/1) |
//! | 8     | deadline in microseconds (0 when absent) |
//! | 8     | sent_at, nanoseconds on the facility clock |
//! | 4     | payload length `m` |
//! | m     | payload |
//!
//! On TCP every envelope is preceded by a 4-byte big-endian length.

use std::io::{self, Read, Write};
use std::time::Duration;

use crate::clock::SimTime;

pub const ENVELOPE_VERSION: u8 = 1;
/// Upper bound on a single framed envelope.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Request = 0,
    Reply = 1,
    Event = 2,
    StreamFrame = 3,
}

impl MessageKind {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => Self::Request,
            1 => Self::Reply,
            2 => Self::Event,
            3 => Self::StreamFrame,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub kind: MessageKind,
    pub correlation_id: u64,
    pub sequence: u64,
    pub topic_or_target: String,
    pub deadline: Option<Duration>,
    pub sent_at: SimTime,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("envelope truncated")]
    Truncated,
    #[error("unsupported envelope version {0}")]
    Version(u8),
    #[error("unknown message kind {0}")]
    Kind(u8),
    #[error("topic is not valid UTF-8")]
    Utf8,
    #[error("topic longer than 65535 bytes")]
    TopicTooLong,
    #[error("{0} trailing bytes after envelope")]
    Trailing(usize),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
}

impl MessageEnvelope {
    pub fn new(kind: MessageKind, topic_or_target: impl Into<String>, payload: Vec<u8>) -> Self {
        MessageEnvelope {
            kind,
            correlation_id: 0,
            sequence: 0,
            topic_or_target: topic_or_target.into(),
            deadline: None,
            sent_at: SimTime::ZERO,
            payload,
        }
    }

    /// Reply envelope carrying this request's correlation id.
    pub fn reply_to(&self, payload: Vec<u8>, sent_at: SimTime) -> Self {
        MessageEnvelope {
            kind: MessageKind::Reply,
            correlation_id: self.correlation_id,
            sequence: 0,
            topic_or_target: self.topic_or_target.clone(),
            deadline: None,
            sent_at,
            payload,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, EnvelopeError> {
        let topic = self.topic_or_target.as_bytes();
        if topic.len() > u16::MAX as usize {
            return Err(EnvelopeError::TopicTooLong);
        }
        let mut out = Vec::with_capacity(41 + topic.len() + self.payload.len());
        out.push(ENVELOPE_VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.correlation_id.to_be_bytes());
        out.extend_from_slice(&self.sequence.to_be_bytes());
        out.extend_from_slice(&(topic.len() as u16).to_be_bytes());
        out.extend_from_slice(topic);
        match self.deadline {
            Some(d) => {
                out.push(1);
                out.extend_from_slice(&(d.as_micros() as u64).to_be_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0u64.to_be_bytes());
            }
        }
        out.extend_from_slice(&self.sent_at.0.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let version = r.u8()?;
        if version != ENVELOPE_VERSION {
            return Err(EnvelopeError::Version(version));
        }
        let kind_byte = r.u8()?;
        let kind = MessageKind::from_u8(kind_byte).ok_or(EnvelopeError::Kind(kind_byte))?;
        let correlation_id = r.u64()?;
        let sequence = r.u64()?;
        let tlen = r.u16()? as usize;
        let topic = std::str::from_utf8(r.take(tlen)?)
            .map_err(|_| EnvelopeError::Utf8)?
            .to_string();
        let has_deadline = r.u8()? != 0;
        let deadline_us = r.u64()?;
        let sent_at = SimTime(r.u64()?);
        let plen = r.u32()? as usize;
        let payload = r.take(plen)?.to_vec();
        if r.pos != bytes.len() {
            return Err(EnvelopeError::Trailing(bytes.len() - r.pos));
        }
        Ok(MessageEnvelope {
            kind,
            correlation_id,
            sequence,
            topic_or_target: topic,
            deadline: has_deadline.then(|| Duration::from_micros(deadline_us)),
            sent_at,
            payload,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EnvelopeError> {
        let end = self.pos.checked_add(n).ok_or(EnvelopeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(EnvelopeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, EnvelopeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, EnvelopeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, EnvelopeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, EnvelopeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes one length-prefixed frame.
pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> io::Result<()> {
    w.write_all(&(frame.len() as u32).to_be_bytes())?;
    w.write_all(frame)?;
    w.flush()
}

/// Reads one length-prefixed frame.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            EnvelopeError::FrameTooLarge(n),
        ));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_layout() {
        let mut e = MessageEnvelope::new(MessageKind::Request, "ab", vec![9, 8]);
        e.correlation_id = 0x0102;
        e.deadline = Some(Duration::from_micros(5));
        e.sent_at = SimTime(7);
        let bytes = e.encode().unwrap();
        #[rustfmt::skip]
        let expect: Vec<u8> = vec![
            1, 0,
            0, 0, 0, 0, 0, 0, 1, 2,
            0, 0, 0, 0, 0, 0, 0, 0,
            0, 2, b'a', b'b',
            1, 0, 0, 0, 0, 0, 0, 0, 5,
            0, 0, 0, 0, 0, 0, 0, 7,
            0, 0, 0, 2, 9, 8,
        ];
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(MessageEnvelope::decode(&[]), Err(EnvelopeError::Truncated));
        assert_eq!(MessageEnvelope::decode(&[2, 0]), Err(EnvelopeError::Version(2)));
        assert_eq!(MessageEnvelope::decode(&[1, 9]), Err(EnvelopeError::Kind(9)));
        let mut ok = MessageEnvelope::new(MessageKind::Event, "t", vec![])
            .encode()
            .unwrap();
        ok.push(0);
        assert_eq!(MessageEnvelope::decode(&ok), Err(EnvelopeError::Trailing(1)));
    }

    #[test]
    fn framing() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 5]);
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), b"hello");
    }

    fn kind() -> impl Strategy<Value = MessageKind> {
        prop_oneof![
            Just(MessageKind::Request),
            Just(MessageKind::Reply),
            Just(MessageKind::Event),
            Just(MessageKind::StreamFrame),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            kind in kind(),
            corr in any::<u64>(),
            seq in any::<u64>(),
            topic in "[a-z/]{0,40}",
            deadline in proptest::option::of(0u64..u64::MAX / 2),
            sent in any::<u64>(),
            payload in proptest::collection::vec(any::<u8>(), 0..256),
        ) {
            let e = MessageEnvelope {
                kind, correlation_id: corr, sequence: seq, topic_or_target: topic,
                deadline: deadline.map(Duration::from_micros), sent_at: SimTime(sent), payload,
            };
            let d = MessageEnvelope::decode(&e.encode().unwrap()).unwrap();
            prop_assert_eq!(d, e);
        }
    }
}
