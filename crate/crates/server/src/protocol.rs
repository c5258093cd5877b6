//! Wire framing, little-endian throughout:
//!
//! ```text
//! "LBWP" | version u8 | type u8 | length u32 | payload[length]
//! ```
//! Payloads by type: ACTION `keys u8 | yaw f32 | pitch f32 | t f64`;
//! FRAME `chunk u32 | frame u8 | height u16 | width u16 | rgb`; PROMPT UTF-8;
//! RESET and STATS_REQ empty; STATS UTF-8 JSON; ERROR `code u16 | UTF-8 detail`.

use lbw_core::world::action::{ActionState, Keys};
use lbw_core::world::render::Frame;

pub const MAGIC: &[u8; 4] = b"LBWP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: usize = 16 << 20;
pub const ACTION_LEN: usize = 17;
const FRAME_HEADER_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Action = 0,
    Frame = 1,
    Prompt = 2,
    Reset = 3,
    StatsReq = 4,
    Stats = 5,
    Error = 6,
}

impl MessageType {
    pub fn from_u8(b: u8) -> Option<Self> {
        use MessageType::*;
        [Action, Frame, Prompt, Reset, StatsReq, Stats, Error].get(b as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionPayload {
    /// bit0 W, bit1 A, bit2 S, bit3 D; bits 4–7 reserved zero.
    pub keys: u8,
    pub yaw_delta: f32,
    pub pitch_delta: f32,
    pub timestamp: f64,
}

impl ActionPayload {
    pub fn from_action(a: &ActionState) -> Self {
        Self { keys: a.keys.bits(), yaw_delta: a.yaw_delta as f32, pitch_delta: a.pitch_delta as f32, timestamp: a.timestamp }
    }

    /// Deltas are clamped and snapped by the action constructor.
    pub fn to_action(&self) -> ActionState {
        ActionState::new(Keys::from_bits_truncate(self.keys), self.yaw_delta as f64, self.pitch_delta as f64, self.timestamp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePayload {
    pub chunk: u32,
    pub frame: u8,
    pub height: u16,
    pub width: u16,
    /// Row-major RGB, `3·height·width` bytes.
    pub rgb: Vec<u8>,
}

impl FramePayload {
    pub fn from_frame(chunk: u32, frame: u8, f: &Frame) -> Self {
        Self { chunk, frame, height: f.height as u16, width: f.width as u16, rgb: f.data.clone() }
    }

    pub fn to_frame(&self) -> Frame {
        Frame { height: self.height as usize, width: self.width as usize, data: self.rgb.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    BadMagic = 1,
    BadVersion = 2,
    LengthOverflow = 3,
    ReservedBits = 4,
    UnknownType = 5,
    MalformedPayload = 6,
    Session = 7,
}

impl ErrorCode {
    pub fn from_u16(c: u16) -> Option<Self> {
        use ErrorCode::*;
        [BadMagic, BadVersion, LengthOverflow, ReservedBits, UnknownType, MalformedPayload, Session]
            .into_iter()
            .find(|e| *e as u16 == c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Action(ActionPayload),
    Frame(FramePayload),
    Prompt(String),
    Reset,
    StatsReq,
    Stats(String),
    Error { code: u16, detail: String },
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Message::Action(_) => MessageType::Action,
            Message::Frame(_) => MessageType::Frame,
            Message::Prompt(_) => MessageType::Prompt,
            Message::Reset => MessageType::Reset,
            Message::StatsReq => MessageType::StatsReq,
            Message::Stats(_) => MessageType::Stats,
            Message::Error { .. } => MessageType::Error,
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        Message::Error { code: code as u16, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("payload length {0} exceeds cap")]
    LengthOverflow(u32),
    #[error("reserved key bits set: {0:#04x}")]
    ReservedBits(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
}

impl ProtocolError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ProtocolError::BadMagic => ErrorCode::BadMagic,
            ProtocolError::BadVersion(_) => ErrorCode::BadVersion,
            ProtocolError::LengthOverflow(_) => ErrorCode::LengthOverflow,
            ProtocolError::ReservedBits(_) => ErrorCode::ReservedBits,
            ProtocolError::UnknownType(_) => ErrorCode::UnknownType,
            ProtocolError::MalformedPayload(_) => ErrorCode::MalformedPayload,
        }
    }

    pub fn to_message(&self) -> Message {
        Message::error(self.code(), self.to_string())
    }
}

/// Result of decoding the front of a byte slice.
#[derive(Clone, Debug, PartialEq)]
pub enum Decoded {
    Message(Message, usize),
    /// The buffer holds a valid prefix; at least this many more bytes are required.
    NeedMore(usize),
    /// Typed failure; skip `consumed` bytes to continue.
    Error(ProtocolError, usize),
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    match msg {
        Message::Action(a) => {
            payload.push(a.keys);
            payload.extend(a.yaw_delta.to_le_bytes());
            payload.extend(a.pitch_delta.to_le_bytes());
            payload.extend(a.timestamp.to_le_bytes());
        }
        Message::Frame(f) => {
            payload.extend(f.chunk.to_le_bytes());
            payload.push(f.frame);
            payload.extend(f.height.to_le_bytes());
            payload.extend(f.width.to_le_bytes());
            payload.extend(&f.rgb);
        }
        Message::Prompt(s) | Message::Stats(s) => payload.extend(s.as_bytes()),
        Message::Reset | Message::StatsReq => {}
        Message::Error { code, detail } => {
            payload.extend(code.to_le_bytes());
            payload.extend(detail.as_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend(MAGIC);
    out.push(VERSION);
    out.push(msg.kind() as u8);
    out.extend((payload.len() as u32).to_le_bytes());
    out.extend(payload);
    out
}

fn utf8(p: &[u8]) -> Result<String, ProtocolError> {
    String::from_utf8(p.to_vec()).map_err(|_| ProtocolError::MalformedPayload("invalid UTF-8".into()))
}

fn parse_payload(kind: MessageType, p: &[u8]) -> Result<Message, ProtocolError> {
    let exact = |n: usize| {
        if p.len() == n {
            Ok(())
        } else {
            Err(ProtocolError::MalformedPayload(format!("{kind:?} payload of {} bytes, expected {n}", p.len())))
        }
    };
    Ok(match kind {
        MessageType::Action => {
            exact(ACTION_LEN)?;
            if p[0] & 0xf0 != 0 {
                return Err(ProtocolError::ReservedBits(p[0]));
            }
            Message::Action(ActionPayload {
                keys: p[0],
                yaw_delta: f32::from_le_bytes(p[1..5].try_into().unwrap()),
                pitch_delta: f32::from_le_bytes(p[5..9].try_into().unwrap()),
                timestamp: f64::from_le_bytes(p[9..17].try_into().unwrap()),
            })
        }
        MessageType::Frame => {
            if p.len() < FRAME_HEADER_LEN {
                return Err(ProtocolError::MalformedPayload("frame header truncated".into()));
            }
            let height = u16::from_le_bytes([p[5], p[6]]);
            let width = u16::from_le_bytes([p[7], p[8]]);
            exact(FRAME_HEADER_LEN + 3 * height as usize * width as usize)?;
            Message::Frame(FramePayload {
                chunk: u32::from_le_bytes(p[0..4].try_into().unwrap()),
                frame: p[4],
                height,
                width,
                rgb: p[FRAME_HEADER_LEN..].to_vec(),
            })
        }
        MessageType::Prompt => Message::Prompt(utf8(p)?),
        MessageType::Reset => {
            exact(0)?;
            Message::Reset
        }
        MessageType::StatsReq => {
            exact(0)?;
            Message::StatsReq
        }
        MessageType::Stats => Message::Stats(utf8(p)?),
        MessageType::Error => {
            if p.len() < 2 {
                return Err(ProtocolError::MalformedPayload("error code truncated".into()));
            }
            Message::Error { code: u16::from_le_bytes([p[0], p[1]]), detail: utf8(&p[2..])? }
        }
    })
}

/// Decode one message from the front of `buf`. Header faults consume one byte
/// so a stream can resynchronize on the next magic; payload faults consume the
/// whole frame so the connection keeps its framing.
pub fn decode(buf: &[u8]) -> Decoded {
    let m = buf.len().min(4);
    if buf[..m] != MAGIC[..m] {
        return Decoded::Error(ProtocolError::BadMagic, 1);
    }
    if buf.len() < HEADER_LEN {
        return Decoded::NeedMore(HEADER_LEN - buf.len());
    }
    if buf[4] != VERSION {
        return Decoded::Error(ProtocolError::BadVersion(buf[4]), 1);
    }
    let len = u32::from_le_bytes(buf[6..10].try_into().unwrap());
    if len as usize > MAX_PAYLOAD {
        return Decoded::Error(ProtocolError::LengthOverflow(len), 1);
    }
    let total = HEADER_LEN + len as usize;
    if buf.len() < total {
        return Decoded::NeedMore(total - buf.len());
    }
    let payload = &buf[HEADER_LEN..total];
    let parsed = match MessageType::from_u8(buf[5]) {
        Some(kind) => parse_payload(kind, payload),
        None => Err(ProtocolError::UnknownType(buf[5])),
    };
    match parsed {
        Ok(msg) => Decoded::Message(msg, total),
        Err(e) => Decoded::Error(e, total),
    }
}

/// Incremental decoder over an arbitrary chunking of the byte stream.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: Vec<u8>,
    start: usize,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start * 2 >= self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Buffered bytes not yet consumed.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Next message or typed error; `None` when more bytes are needed.
    /// Consecutive bad-magic bytes collapse into a single error.
    pub fn next(&mut self) -> Option<Result<Message, ProtocolError>> {
        let mut skipped_magic = false;
        loop {
            let rest = &self.buf[self.start..];
            if rest.is_empty() {
                return skipped_magic.then_some(Err(ProtocolError::BadMagic));
            }
            match decode(rest) {
                Decoded::Message(m, n) => {
                    if skipped_magic {
                        return Some(Err(ProtocolError::BadMagic));
                    }
                    self.start += n;
                    return Some(Ok(m));
                }
                Decoded::NeedMore(_) => return skipped_magic.then_some(Err(ProtocolError::BadMagic)),
                Decoded::Error(ProtocolError::BadMagic, n) => {
                    self.start += n;
                    skipped_magic = true;
                }
                Decoded::Error(e, n) => {
                    if skipped_magic {
                        return Some(Err(ProtocolError::BadMagic));
                    }
                    self.start += n;
                    return Some(Err(e));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_round_trip_and_bit_layout() {
        let m = Message::Action(ActionPayload { keys: 0b1001, yaw_delta: 0.1, pitch_delta: 0.0, timestamp: 1.5 });
        let bytes = encode(&m);
        assert_eq!(bytes.len(), HEADER_LEN + ACTION_LEN);
        assert_eq!(bytes[HEADER_LEN], 0b0000_1001);
        assert_eq!(decode(&bytes), Decoded::Message(m, bytes.len()));
    }

    #[test]
    fn truncation_needs_more_bytes() {
        let bytes = encode(&Message::Prompt("night".into()));
        for cut in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..cut]), Decoded::NeedMore(_)), "cut {cut}");
        }
    }

    #[test]
    fn distinct_error_codes() {
        let mut bad = encode(&Message::Reset);
        bad[4] = 9;
        assert_eq!(decode(&bad), Decoded::Error(ProtocolError::BadVersion(9), 1));
        let mut big = encode(&Message::Reset);
        big[6..10].copy_from_slice(&(MAX_PAYLOAD as u32 + 1).to_le_bytes());
        assert!(matches!(decode(&big), Decoded::Error(ProtocolError::LengthOverflow(_), 1)));
        let mut reserved = encode(&Message::Action(ActionPayload { keys: 1, yaw_delta: 0.0, pitch_delta: 0.0, timestamp: 0.0 }));
        reserved[HEADER_LEN] = 0x11;
        assert_eq!(decode(&reserved), Decoded::Error(ProtocolError::ReservedBits(0x11), reserved.len()));
        let mut unknown = encode(&Message::Reset);
        unknown[5] = 42;
        assert_eq!(decode(&unknown), Decoded::Error(ProtocolError::UnknownType(42), HEADER_LEN));
        let codes: std::collections::HashSet<u16> = [
            ProtocolError::BadMagic,
            ProtocolError::BadVersion(0),
            ProtocolError::LengthOverflow(0),
            ProtocolError::ReservedBits(0),
            ProtocolError::UnknownType(0),
            ProtocolError::MalformedPayload(String::new()),
        ]
        .iter()
        .map(|e| e.code() as u16)
        .collect();
        assert_eq!(codes.len(), 6);
    }

    #[test]
    fn decoder_resumes_across_arbitrary_splits_and_resyncs() {
        let msgs = vec![
            Message::Prompt("day".into()),
            Message::Reset,
            Message::Frame(FramePayload { chunk: 3, frame: 1, height: 1, width: 2, rgb: vec![1, 2, 3, 4, 5, 6] }),
        ];
        let mut stream = b"junk".to_vec();
        for m in &msgs {
            stream.extend(encode(m));
        }
        for split in 1..stream.len() {
            let mut d = Decoder::new();
            let mut out = Vec::new();
            for piece in stream.chunks(split) {
                d.feed(piece);
                while let Some(r) = d.next() {
                    out.push(r);
                }
            }
            assert_eq!(out[0], Err(ProtocolError::BadMagic));
            assert!(out.iter().filter_map(|r| r.as_ref().err()).all(|e| *e == ProtocolError::BadMagic));
            let got: Vec<Message> = out.iter().filter_map(|r| r.clone().ok()).collect();
            assert_eq!(got, msgs, "split {split}");
        }
    }
}
