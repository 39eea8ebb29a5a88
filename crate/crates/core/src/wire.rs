//! Binary frame format spoken by every node.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MMPI" (4D 4D 50 49)
//!      4     1  version (0x01)
//!      5     1  message type
//!      6     4  source rank   (u32 BE, 0xFFFFFFFF = unassigned)
//!     10     4  dest rank     (u32 BE, 0xFFFFFFFF = head control endpoint)
//!     14     4  tag           (u32 BE)
//!     18     1  payload kind
//!     19     4  payload length in bytes (u32 BE)
//!     23     n  payload
//! ```
//!
//! Array payloads are sequences of 8-byte big-endian elements; f64 values
//! travel as their raw IEEE-754 bits.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MMPI";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 23;
pub const MAX_PAYLOAD_LEN: usize = (1 << 31) - 1;

/// Rank value meaning "not yet assigned" (source) or "head control endpoint" (dest).
pub const NO_RANK: u32 = 0xFFFF_FFFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported protocol version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unknown payload kind {0}")]
    UnknownKind(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("array payload length {0} is not a multiple of 8")]
    LengthMismatch(usize),
    #[error("payload of {0} bytes exceeds the 2^31-1 byte limit")]
    OversizePayload(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Welcome = 2,
    Start = 3,
    Send = 4,
    Barrier = 5,
    BarrierRelease = 6,
    Shutdown = 7,
    Error = 8,
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;

    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            1 => MsgType::Hello,
            2 => MsgType::Welcome,
            3 => MsgType::Start,
            4 => MsgType::Send,
            5 => MsgType::Barrier,
            6 => MsgType::BarrierRelease,
            7 => MsgType::Shutdown,
            8 => MsgType::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PayloadKind {
    Empty = 0,
    Bytes = 1,
    U64Array = 2,
    F64Array = 3,
}

impl TryFrom<u8> for PayloadKind {
    type Error = WireError;

    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0 => PayloadKind::Empty,
            1 => PayloadKind::Bytes,
            2 => PayloadKind::U64Array,
            3 => PayloadKind::F64Array,
            other => return Err(WireError::UnknownKind(other)),
        })
    }
}

/// Typed message body.
///
/// Equality on `F64` compares bit patterns, so NaNs and signed zeros
/// survive the round-trip identity.
#[derive(Debug, Clone, Default)]
pub enum Payload {
    #[default]
    Empty,
    Bytes(Vec<u8>),
    U64(Vec<u64>),
    F64(Vec<f64>),
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Payload::Empty, Payload::Empty) => true,
            (Payload::Bytes(a), Payload::Bytes(b)) => a == b,
            (Payload::U64(a), Payload::U64(b)) => a == b,
            (Payload::F64(a), Payload::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Eq for Payload {}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Empty => PayloadKind::Empty,
            Payload::Bytes(_) => PayloadKind::Bytes,
            Payload::U64(_) => PayloadKind::U64Array,
            Payload::F64(_) => PayloadKind::F64Array,
        }
    }

    /// Encoded size of the payload body in bytes.
    pub fn byte_len(&self) -> usize {
        match self {
            Payload::Empty => 0,
            Payload::Bytes(b) => b.len(),
            Payload::U64(v) => v.len() * 8,
            Payload::F64(v) => v.len() * 8,
        }
    }

    fn write_body(&self, out: &mut Vec<u8>) {
        match self {
            Payload::Empty => {}
            Payload::Bytes(b) => out.extend_from_slice(b),
            Payload::U64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            Payload::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_bits().to_be_bytes())),
        }
    }

    fn from_body(kind: PayloadKind, body: &[u8]) -> Result<Self, WireError> {
        let words = || {
            if !body.len().is_multiple_of(8) {
                return Err(WireError::LengthMismatch(body.len()));
            }
            Ok(body
                .chunks_exact(8)
                .map(|c| u64::from_be_bytes(c.try_into().unwrap())))
        };
        Ok(match kind {
            // A non-empty body under EMPTY is a framing error, not data.
            PayloadKind::Empty if body.is_empty() => Payload::Empty,
            PayloadKind::Empty => return Err(WireError::LengthMismatch(body.len())),
            PayloadKind::Bytes => Payload::Bytes(body.to_vec()),
            PayloadKind::U64Array => Payload::U64(words()?.collect()),
            PayloadKind::F64Array => Payload::F64(words()?.map(f64::from_bits).collect()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageFrame {
    pub msg_type: MsgType,
    pub source: u32,
    pub dest: u32,
    pub tag: u32,
    pub payload: Payload,
}

impl MessageFrame {
    pub fn new(msg_type: MsgType, source: u32, dest: u32, tag: u32, payload: Payload) -> Self {
        MessageFrame {
            msg_type,
            source,
            dest,
            tag,
            payload,
        }
    }

    /// A control frame with tag 0 and no payload.
    pub fn control(msg_type: MsgType, source: u32, dest: u32) -> Self {
        Self::new(msg_type, source, dest, 0, Payload::Empty)
    }
}

pub fn check_payload_len(len: usize) -> Result<(), WireError> {
    if len > MAX_PAYLOAD_LEN {
        Err(WireError::OversizePayload(len))
    } else {
        Ok(())
    }
}

pub fn encode_frame(frame: &MessageFrame) -> Result<Vec<u8>, WireError> {
    let len = frame.payload.byte_len();
    check_payload_len(len)?;
    let mut out = Vec::with_capacity(HEADER_LEN + len);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.source.to_be_bytes());
    out.extend_from_slice(&frame.dest.to_be_bytes());
    out.extend_from_slice(&frame.tag.to_be_bytes());
    out.push(frame.payload.kind() as u8);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    frame.payload.write_body(&mut out);
    Ok(out)
}

/// Parsed fixed-size header; `payload_len` bytes of body follow it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub msg_type: MsgType,
    pub source: u32,
    pub dest: u32,
    pub tag: u32,
    pub kind: PayloadKind,
    pub payload_len: usize,
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// Validates as much of the header as `bytes` holds. Every field that is
/// present is checked before reporting `Truncated`, so garbage is rejected
/// early and a strict prefix of a valid frame is never mistaken for one.
pub fn decode_header(bytes: &[u8]) -> Result<FrameHeader, WireError> {
    let avail = bytes.len();
    let magic_part = avail.min(MAGIC.len());
    if bytes[..magic_part] != MAGIC[..magic_part] {
        return Err(WireError::BadMagic);
    }
    if avail > 4 && bytes[4] != VERSION {
        return Err(WireError::UnsupportedVersion(bytes[4]));
    }
    if avail > 5 {
        MsgType::try_from(bytes[5])?;
    }
    if avail > 18 {
        PayloadKind::try_from(bytes[18])?;
    }
    if avail < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            available: avail,
        });
    }
    let kind = PayloadKind::try_from(bytes[18])?;
    let payload_len = be32(bytes, 19) as usize;
    check_payload_len(payload_len)?;
    match kind {
        PayloadKind::Empty if payload_len != 0 => {
            return Err(WireError::LengthMismatch(payload_len))
        }
        PayloadKind::U64Array | PayloadKind::F64Array if !payload_len.is_multiple_of(8) => {
            return Err(WireError::LengthMismatch(payload_len))
        }
        _ => {}
    }
    Ok(FrameHeader {
        msg_type: MsgType::try_from(bytes[5])?,
        source: be32(bytes, 6),
        dest: be32(bytes, 10),
        tag: be32(bytes, 14),
        kind,
        payload_len,
    })
}

/// Decodes one frame from the front of `bytes`, returning it with the
/// number of bytes consumed. Trailing bytes are left for the next call.
pub fn decode_frame(bytes: &[u8]) -> Result<(MessageFrame, usize), WireError> {
    let header = decode_header(bytes)?;
    let total = HEADER_LEN + header.payload_len;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let payload = Payload::from_body(header.kind, &bytes[HEADER_LEN..total])?;
    Ok((
        MessageFrame {
            msg_type: header.msg_type,
            source: header.source,
            dest: header.dest,
            tag: header.tag,
            payload,
        },
        total,
    ))
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
}

/// Reads exactly one frame from a blocking stream. A clean EOF before the
/// first header byte is `Closed`; EOF mid-frame is an I/O error.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<MessageFrame, StreamError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(StreamError::Closed),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = decode_header(&header)?;
    let mut body = vec![0u8; h.payload_len];
    reader.read_exact(&mut body)?;
    Ok(MessageFrame {
        msg_type: h.msg_type,
        source: h.source,
        dest: h.dest,
        tag: h.tag,
        payload: Payload::from_body(h.kind, &body)?,
    })
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &MessageFrame) -> Result<(), StreamError> {
    let bytes = encode_frame(frame)?;
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}
