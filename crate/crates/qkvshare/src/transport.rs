//! Framed point-to-point transport for moving cards between agents.
//!
//! Wire unit is a frame: a 1-byte type tag, a little-endian u32 payload
//! length, the payload, and a CRC32 trailer computed over everything
//! before it (type + length + payload). An empty frame is exactly
//! 9 bytes. Sessions speak hello → hello_ack before any card moves;
//! compatibility requires equal protocol versions and equal model ids,
//! and rejections carry machine-readable reason codes in an error frame.
//!
//! The layers keep their errors apart on purpose: a flipped bit inside a
//! framed card surfaces as a frame CRC mismatch, while a card that was
//! already corrupt when framed passes the frame check and fails card
//! decoding.

use std::io::{Read, Write};

use crate::cachecard::{decode_card, encode_card, CacheCard, CardError};
use crate::quantizer::BitWidth;

/// Version of the handshake/frame protocol spoken here.
pub const PROTOCOL_VERSION: u16 = 1;
/// Hard ceiling on a declared payload length.
pub const MAX_FRAME_PAYLOAD: u64 = 1 << 31;
/// Bytes of frame overhead around any payload (type + length + CRC).
pub const FRAME_OVERHEAD: usize = 9;

/// Errors from framing, handshaking, and card exchange.
#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("unknown frame type 0x{0:02X}")]
    UnknownFrameType(u8),
    #[error("declared payload of {len} bytes exceeds the {max}-byte limit")]
    Oversize { len: u64, max: u64 },
    #[error("frame CRC mismatch: stored {stored:#010X}, computed {computed:#010X}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("short read in {section}: needed {needed} more bytes")]
    ShortRead {
        section: &'static str,
        needed: usize,
    },
    #[error("malformed handshake: {0}")]
    InvalidHandshake(String),
    #[error("handshake rejected ({}): {detail}", code.as_str())]
    HandshakeRejected { code: RejectCode, detail: String },
    #[error("session state: {0}")]
    SessionState(String),
    #[error(transparent)]
    Card(#[from] CardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Machine-readable handshake rejection reasons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectCode {
    VersionMismatch,
    ModelMismatch,
}

impl RejectCode {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectCode::VersionMismatch => "version_mismatch",
            RejectCode::ModelMismatch => "model_mismatch",
        }
    }

    fn to_wire(self) -> u8 {
        match self {
            RejectCode::VersionMismatch => 1,
            RejectCode::ModelMismatch => 2,
        }
    }

    fn from_wire(b: u8) -> Option<Self> {
        match b {
            1 => Some(RejectCode::VersionMismatch),
            2 => Some(RejectCode::ModelMismatch),
            _ => None,
        }
    }
}

/// Frame type tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    HelloAck = 2,
    Card = 3,
    Error = 4,
    Bye = 5,
}

impl FrameType {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            1 => Some(FrameType::Hello),
            2 => Some(FrameType::HelloAck),
            3 => Some(FrameType::Card),
            4 => Some(FrameType::Error),
            5 => Some(FrameType::Bye),
            _ => None,
        }
    }
}

/// One wire frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: Vec<u8>) -> Self {
        Self {
            frame_type,
            payload,
        }
    }
}

/// Serialize one frame: type, length, payload, CRC32 trailer.
pub fn frame_encode(frame: &Frame) -> Result<Vec<u8>, TransportError> {
    let len = frame.payload.len() as u64;
    if len > MAX_FRAME_PAYLOAD {
        return Err(TransportError::Oversize {
            len,
            max: MAX_FRAME_PAYLOAD,
        });
    }
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + frame.payload.len());
    out.push(frame.frame_type.as_u8());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_exact_or<R: Read>(
    reader: &mut R,
    buf: &mut [u8],
    section: &'static str,
) -> Result<(), TransportError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(TransportError::ShortRead {
                    section,
                    needed: buf.len() - filled,
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(TransportError::Io(e)),
        }
    }
    Ok(())
}

/// Read exactly one frame from `reader`, leaving any following bytes
/// untouched. The CRC is verified before the type tag is interpreted,
/// so a bit flip anywhere reports as a CRC mismatch rather than as a
/// spurious unknown type.
pub fn frame_decode<R: Read>(reader: &mut R) -> Result<Frame, TransportError> {
    let mut header = [0u8; 5];
    read_exact_or(reader, &mut header, "frame header")?;
    let declared = u32::from_le_bytes([header[1], header[2], header[3], header[4]]) as u64;
    if declared > MAX_FRAME_PAYLOAD {
        return Err(TransportError::Oversize {
            len: declared,
            max: MAX_FRAME_PAYLOAD,
        });
    }
    let mut payload = vec![0u8; declared as usize];
    read_exact_or(reader, &mut payload, "frame payload")?;
    let mut trailer = [0u8; 4];
    read_exact_or(reader, &mut trailer, "frame CRC trailer")?;
    let stored = u32::from_le_bytes(trailer);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header);
    hasher.update(&payload);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(TransportError::CrcMismatch { stored, computed });
    }
    let frame_type =
        FrameType::from_u8(header[0]).ok_or(TransportError::UnknownFrameType(header[0]))?;
    Ok(Frame {
        frame_type,
        payload,
    })
}

// ---------------------------------------------------------------------------
// Handshake
// ---------------------------------------------------------------------------

/// Contents of a hello / hello_ack payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handshake {
    pub protocol_version: u16,
    pub agent_id: String,
    pub model_id: String,
    pub supported_widths: Vec<BitWidth>,
}

impl Handshake {
    pub fn new(agent_id: &str, model_id: &str) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            agent_id: agent_id.to_owned(),
            model_id: model_id.to_owned(),
            supported_widths: vec![BitWidth::B2, BitWidth::B4, BitWidth::B8, BitWidth::B16],
        }
    }
}

fn put_short_string(out: &mut Vec<u8>, s: &str, what: &str) -> Result<(), TransportError> {
    if s.is_empty() {
        return Err(TransportError::InvalidHandshake(format!(
            "{what} must be non-empty"
        )));
    }
    if s.len() > 255 {
        return Err(TransportError::InvalidHandshake(format!(
            "{what} exceeds 255 bytes"
        )));
    }
    out.push(s.len() as u8);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serialize a handshake payload: version u16 LE, length-prefixed agent
/// and model ids, then a count-prefixed width list.
pub fn encode_handshake(h: &Handshake) -> Result<Vec<u8>, TransportError> {
    let mut out = Vec::new();
    out.extend_from_slice(&h.protocol_version.to_le_bytes());
    put_short_string(&mut out, &h.agent_id, "agent id")?;
    put_short_string(&mut out, &h.model_id, "model id")?;
    if h.supported_widths.is_empty() {
        return Err(TransportError::InvalidHandshake(
            "supported width list must be non-empty".into(),
        ));
    }
    out.push(h.supported_widths.len() as u8);
    for w in &h.supported_widths {
        out.push(w.bits());
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], TransportError> {
    if buf.len() < n {
        return Err(TransportError::InvalidHandshake(format!(
            "truncated: needed {n} more bytes"
        )));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_short_string(buf: &mut &[u8], what: &str) -> Result<String, TransportError> {
    let len = take(buf, 1)?[0] as usize;
    if len == 0 {
        return Err(TransportError::InvalidHandshake(format!(
            "{what} must be non-empty"
        )));
    }
    let bytes = take(buf, len)?;
    String::from_utf8(bytes.to_vec())
        .map_err(|_| TransportError::InvalidHandshake(format!("{what} is not valid UTF-8")))
}

/// Parse a handshake payload; trailing bytes are rejected.
pub fn decode_handshake(payload: &[u8]) -> Result<Handshake, TransportError> {
    let mut buf = payload;
    let v = take(&mut buf, 2)?;
    let protocol_version = u16::from_le_bytes([v[0], v[1]]);
    let agent_id = take_short_string(&mut buf, "agent id")?;
    let model_id = take_short_string(&mut buf, "model id")?;
    let count = take(&mut buf, 1)?[0] as usize;
    if count == 0 {
        return Err(TransportError::InvalidHandshake(
            "supported width list must be non-empty".into(),
        ));
    }
    let mut supported_widths = Vec::with_capacity(count);
    for _ in 0..count {
        let bits = take(&mut buf, 1)?[0];
        let w = BitWidth::from_bits(bits).ok_or_else(|| {
            TransportError::InvalidHandshake(format!("unsupported width {bits} in handshake"))
        })?;
        supported_widths.push(w);
    }
    if !buf.is_empty() {
        return Err(TransportError::InvalidHandshake(format!(
            "{} trailing bytes after handshake",
            buf.len()
        )));
    }
    Ok(Handshake {
        protocol_version,
        agent_id,
        model_id,
        supported_widths,
    })
}

fn compatibility(local: &Handshake, remote: &Handshake) -> Result<(), (RejectCode, String)> {
    if local.protocol_version != remote.protocol_version {
        return Err((
            RejectCode::VersionMismatch,
            format!(
                "local speaks protocol {}, peer speaks {}",
                local.protocol_version, remote.protocol_version
            ),
        ));
    }
    if local.model_id != remote.model_id {
        return Err((
            RejectCode::ModelMismatch,
            format!(
                "local serves model {:?}, peer serves {:?}",
                local.model_id, remote.model_id
            ),
        ));
    }
    Ok(())
}

fn encode_rejection(code: RejectCode, detail: &str) -> Vec<u8> {
    let mut payload = Vec::with_capacity(1 + detail.len());
    payload.push(code.to_wire());
    payload.extend_from_slice(detail.as_bytes());
    payload
}

fn decode_rejection(payload: &[u8]) -> TransportError {
    if payload.is_empty() {
        return TransportError::SessionState("peer sent an empty error frame".into());
    }
    match RejectCode::from_wire(payload[0]) {
        Some(code) => TransportError::HandshakeRejected {
            code,
            detail: String::from_utf8_lossy(&payload[1..]).into_owned(),
        },
        None => TransportError::SessionState(format!(
            "peer sent an error frame with unknown reason code {}",
            payload[0]
        )),
    }
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

/// A point-to-point session over any `Read + Write` byte stream. Cards
/// may only move after a completed handshake.
pub struct Session<S: Read + Write> {
    stream: S,
    local: Handshake,
    peer: Option<Handshake>,
}

impl<S: Read + Write> Session<S> {
    pub fn new(stream: S, agent_id: &str, model_id: &str) -> Self {
        Self::with_handshake(stream, Handshake::new(agent_id, model_id))
    }

    pub fn with_handshake(stream: S, local: Handshake) -> Self {
        Self {
            stream,
            local,
            peer: None,
        }
    }

    pub fn is_established(&self) -> bool {
        self.peer.is_some()
    }

    pub fn peer(&self) -> Option<&Handshake> {
        self.peer.as_ref()
    }

    fn write_frame(&mut self, frame_type: FrameType, payload: Vec<u8>) -> Result<(), TransportError> {
        let bytes = frame_encode(&Frame::new(frame_type, payload))?;
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    /// Client side: send hello, wait for hello_ack (or a rejection).
    pub fn initiate(&mut self) -> Result<&Handshake, TransportError> {
        if self.peer.is_some() {
            return Err(TransportError::SessionState(
                "handshake already completed".into(),
            ));
        }
        let hello = encode_handshake(&self.local)?;
        self.write_frame(FrameType::Hello, hello)?;
        let reply = frame_decode(&mut self.stream)?;
        match reply.frame_type {
            FrameType::HelloAck => {
                let remote = decode_handshake(&reply.payload)?;
                if let Err((code, detail)) = compatibility(&self.local, &remote) {
                    return Err(TransportError::HandshakeRejected { code, detail });
                }
                self.peer = Some(remote);
                Ok(self.peer.as_ref().expect("just set"))
            }
            FrameType::Error => Err(decode_rejection(&reply.payload)),
            other => Err(TransportError::SessionState(format!(
                "expected hello_ack, peer sent {other:?}"
            ))),
        }
    }

    /// Server side: wait for hello; acknowledge if compatible, otherwise
    /// send a coded error frame and fail.
    pub fn accept(&mut self) -> Result<&Handshake, TransportError> {
        if self.peer.is_some() {
            return Err(TransportError::SessionState(
                "handshake already completed".into(),
            ));
        }
        let hello = frame_decode(&mut self.stream)?;
        if hello.frame_type != FrameType::Hello {
            return Err(TransportError::SessionState(format!(
                "expected hello, peer sent {:?}",
                hello.frame_type
            )));
        }
        let remote = decode_handshake(&hello.payload)?;
        if let Err((code, detail)) = compatibility(&self.local, &remote) {
            self.write_frame(FrameType::Error, encode_rejection(code, &detail))?;
            return Err(TransportError::HandshakeRejected { code, detail });
        }
        let ack = encode_handshake(&self.local)?;
        self.write_frame(FrameType::HelloAck, ack)?;
        self.peer = Some(remote);
        Ok(self.peer.as_ref().expect("just set"))
    }

    fn require_established(&self, action: &str) -> Result<(), TransportError> {
        if self.peer.is_none() {
            return Err(TransportError::SessionState(format!(
                "cannot {action} before the handshake completes"
            )));
        }
        Ok(())
    }

    /// Frame and send an encoded card.
    pub fn send_card(&mut self, card: &CacheCard) -> Result<(), TransportError> {
        self.require_established("send a card")?;
        let bytes = encode_card(card);
        self.write_frame(FrameType::Card, bytes)
    }

    /// Receive one card frame and decode it. Frame-level corruption and
    /// card-level corruption surface as distinct errors.
    pub fn receive_card(&mut self) -> Result<CacheCard, TransportError> {
        self.require_established("receive a card")?;
        let frame = frame_decode(&mut self.stream)?;
        match frame.frame_type {
            FrameType::Card => Ok(decode_card(&frame.payload)?),
            FrameType::Bye => Err(TransportError::SessionState(
                "peer closed the session".into(),
            )),
            other => Err(TransportError::SessionState(format!(
                "expected a card frame, peer sent {other:?}"
            ))),
        }
    }

    /// Send the closing frame.
    pub fn send_bye(&mut self) -> Result<(), TransportError> {
        self.write_frame(FrameType::Bye, Vec::new())
    }

    /// Wait for the peer's closing frame.
    pub fn receive_bye(&mut self) -> Result<(), TransportError> {
        let frame = frame_decode(&mut self.stream)?;
        if frame.frame_type != FrameType::Bye {
            return Err(TransportError::SessionState(format!(
                "expected bye, peer sent {:?}",
                frame.frame_type
            )));
        }
        Ok(())
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}
