//! Socket framing: a fixed 32-byte little-endian header plus payload.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "GDRA"
//!      4     1  version (currently 1)
//!      5     1  msg_type      0 = data, 1 = control
//!      6     1  phase         0 = reduce-scatter, 1 = broadcast (0 for control)
//!      7     1  reserved      always 0
//!      8     4  sender        u32 LE (0xFFFF_FFFF = job server)
//!     12     4  block_index   u32 LE (0 for control)
//!     16     8  iteration     u64 LE
//!     24     8  payload_len   u64 LE
//! ```
//!
//! Data payloads are gradient elements encoded at the buffer's element width
//! (4-byte frames carry `f32` LE, 8-byte frames `f64` LE). Control payloads
//! are UTF-8 `key=value` lines: the first line is always `kind=<token>`,
//! the remaining body entries follow sorted by key.

use std::io::{Read, Write};

use crate::buffers::ElementWidth;
use crate::transport::{ControlKind, ControlMessage, DataMessage, NodeId, Phase, TransportError};

pub const MAGIC: [u8; 4] = *b"GDRA";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;

const MSG_TYPE_DATA: u8 = 0;
const MSG_TYPE_CONTROL: u8 = 1;

/// Refuse to allocate for payloads beyond this (a malformed-length guard,
/// not a protocol limit).
const MAX_PAYLOAD: u64 = 1 << 31;

/// Decoded 32-byte header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub is_control: bool,
    pub phase: Phase,
    pub sender: u32,
    pub block_index: u32,
    pub iteration: u64,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = VERSION;
        h[5] = if self.is_control { MSG_TYPE_CONTROL } else { MSG_TYPE_DATA };
        h[6] = self.phase.as_u8();
        h[7] = 0;
        h[8..12].copy_from_slice(&self.sender.to_le_bytes());
        h[12..16].copy_from_slice(&self.block_index.to_le_bytes());
        h[16..24].copy_from_slice(&self.iteration.to_le_bytes());
        h[24..32].copy_from_slice(&self.payload_len.to_le_bytes());
        h
    }

    pub fn decode(h: &[u8; HEADER_LEN]) -> Result<Self, TransportError> {
        if h[0..4] != MAGIC {
            return Err(TransportError::Malformed("bad magic".into()));
        }
        if h[4] != VERSION {
            return Err(TransportError::Malformed(format!(
                "unsupported version {}",
                h[4]
            )));
        }
        let is_control = match h[5] {
            MSG_TYPE_DATA => false,
            MSG_TYPE_CONTROL => true,
            t => return Err(TransportError::Malformed(format!("unknown msg_type {t}"))),
        };
        let phase = Phase::from_u8(h[6])
            .ok_or_else(|| TransportError::Malformed(format!("unknown phase {}", h[6])))?;
        if h[7] != 0 {
            return Err(TransportError::Malformed("reserved byte must be 0".into()));
        }
        let payload_len = u64::from_le_bytes(h[24..32].try_into().unwrap());
        if payload_len > MAX_PAYLOAD {
            return Err(TransportError::Malformed(format!(
                "payload length {payload_len} exceeds limit"
            )));
        }
        Ok(Self {
            is_control,
            phase,
            sender: u32::from_le_bytes(h[8..12].try_into().unwrap()),
            block_index: u32::from_le_bytes(h[12..16].try_into().unwrap()),
            iteration: u64::from_le_bytes(h[16..24].try_into().unwrap()),
            payload_len,
        })
    }
}

/// Encode gradient elements at the given wire width.
pub fn encode_elements(elems: &[f64], width: ElementWidth) -> Vec<u8> {
    let mut out = Vec::with_capacity(elems.len() * width.bytes());
    match width {
        ElementWidth::Four => {
            for &x in elems {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        ElementWidth::Eight => {
            for &x in elems {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

/// Decode gradient elements into `out` (which fixes the expected count).
pub fn decode_elements(
    bytes: &[u8],
    width: ElementWidth,
    out: &mut [f64],
) -> Result<(), TransportError> {
    let w = width.bytes();
    if bytes.len() != out.len() * w {
        return Err(TransportError::Malformed(format!(
            "element payload of {} bytes does not decode into {} elements at width {w}",
            bytes.len(),
            out.len()
        )));
    }
    match width {
        ElementWidth::Four => {
            for (chunk, dst) in bytes.chunks_exact(4).zip(out.iter_mut()) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
        ElementWidth::Eight => {
            for (chunk, dst) in bytes.chunks_exact(8).zip(out.iter_mut()) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    Ok(())
}

fn check_kv(s: &str) -> Result<(), TransportError> {
    if s.contains('=') || s.contains('\n') {
        return Err(TransportError::Malformed(format!(
            "control keys/values must not contain '=' or newline: {s:?}"
        )));
    }
    Ok(())
}

/// Encode a control message body as `key=value` lines.
pub fn encode_control_payload(msg: &ControlMessage) -> Result<Vec<u8>, TransportError> {
    let mut text = format!("kind={}\n", msg.kind.token());
    for (k, v) in &msg.body {
        check_kv(k)?;
        check_kv(v)?;
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    Ok(text.into_bytes())
}

pub fn decode_control_payload(
    header: &FrameHeader,
    payload: &[u8],
) -> Result<ControlMessage, TransportError> {
    let text = std::str::from_utf8(payload)
        .map_err(|_| TransportError::Malformed("control payload is not UTF-8".into()))?;
    let mut lines = text.lines();
    let kind_line = lines
        .next()
        .ok_or_else(|| TransportError::Malformed("empty control payload".into()))?;
    let kind = kind_line
        .strip_prefix("kind=")
        .and_then(ControlKind::from_token)
        .ok_or_else(|| TransportError::Malformed(format!("bad kind line {kind_line:?}")))?;
    let mut msg = ControlMessage::new(kind, NodeId::from_u32(header.sender), header.iteration);
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TransportError::Malformed(format!("bad body line {line:?}")))?;
        msg.body.insert(k.to_string(), v.to_string());
    }
    Ok(msg)
}

/// Full frame (header + payload) for a data message.
pub fn encode_data_frame(msg: &DataMessage) -> Vec<u8> {
    let header = FrameHeader {
        is_control: false,
        phase: msg.phase,
        sender: msg.sender,
        block_index: msg.block_index,
        iteration: msg.iteration,
        payload_len: msg.payload.len() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&msg.payload);
    out
}

/// Full frame (header + payload) for a control message.
pub fn encode_control_frame(msg: &ControlMessage) -> Result<Vec<u8>, TransportError> {
    let payload = encode_control_payload(msg)?;
    let header = FrameHeader {
        is_control: true,
        phase: Phase::ReduceScatter,
        sender: msg.sender.as_u32(),
        block_index: 0,
        iteration: msg.iteration,
        payload_len: payload.len() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Either side of the socket protocol.
#[derive(Debug)]
pub enum Frame {
    Data(DataMessage),
    Control(ControlMessage),
}

/// Read one frame from a stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, TransportError> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)?;
    let header = FrameHeader::decode(&h)?;
    let mut payload = vec![0u8; header.payload_len as usize];
    r.read_exact(&mut payload)?;
    if header.is_control {
        Ok(Frame::Control(decode_control_payload(&header, &payload)?))
    } else {
        Ok(Frame::Data(DataMessage {
            iteration: header.iteration,
            phase: header.phase,
            sender: header.sender,
            block_index: header.block_index,
            payload,
        }))
    }
}

/// Write one pre-encoded frame to a stream.
pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> Result<(), TransportError> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}
