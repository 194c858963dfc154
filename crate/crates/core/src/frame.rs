//! Wire framing shared by both transports.
//!
//! Every frame is a fixed 40-byte little-endian header followed by
//! `payload_len` bytes:
//!
//! ```text
//! off  size  field
//!   0     4  magic "LCI2"
//!   4     1  version (1)
//!   5     1  opcode
//!   6     2  flags
//!   8     4  src_rank
//!  12     4  payload_len
//!  16     8  tag
//!  24     4  imm
//!  28     4  rcomp
//!  32     8  xfer_id
//! ```
//!
//! Flags bit 0 marks metadata carried in the 64-bit `tag` and 32-bit `rcomp`
//! fields; when clear, `imm` holds the packed 16-bit tag and 15-bit handle.
//! Bits 8..15 name the matching engine (by allocation index) that the
//! receiver inserts a send into.

use std::fmt;
use std::ops::Deref;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use bytes::{Buf, Bytes, BytesMut};

use crate::error::{Error, Result};
use crate::packet_pool::Packet;

pub const HEADER_LEN: usize = 40;
pub const MAGIC: [u8; 4] = *b"LCI2";
pub const VERSION: u8 = 1;

pub const FLAG_META_IN_PAYLOAD: u16 = 1;
const ENGINE_SHIFT: u16 = 8;

/// Upper bound on a single frame's payload accepted by the stream decoder.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    EagerSend = 1,
    EagerAm = 2,
    Rts = 3,
    Cts = 4,
    RndvData = 5,
    Put = 6,
    PutAck = 7,
    GetReq = 8,
    GetRep = 9,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Option<Opcode> {
        Some(match v {
            1 => Opcode::EagerSend,
            2 => Opcode::EagerAm,
            3 => Opcode::Rts,
            4 => Opcode::Cts,
            5 => Opcode::RndvData,
            6 => Opcode::Put,
            7 => Opcode::PutAck,
            8 => Opcode::GetReq,
            9 => Opcode::GetRep,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub opcode: Opcode,
    pub flags: u16,
    pub src_rank: u32,
    pub payload_len: u32,
    pub tag: u64,
    pub imm: u32,
    pub rcomp: u32,
    pub xfer_id: u64,
}

impl FrameHeader {
    pub fn new(opcode: Opcode, src_rank: u32) -> Self {
        FrameHeader {
            opcode,
            flags: 0,
            src_rank,
            payload_len: 0,
            tag: 0,
            imm: 0,
            rcomp: 0,
            xfer_id: 0,
        }
    }

    pub fn meta_in_payload(&self) -> bool {
        self.flags & FLAG_META_IN_PAYLOAD != 0
    }

    pub fn engine_index(&self) -> u8 {
        (self.flags >> ENGINE_SHIFT) as u8
    }

    pub fn set_engine_index(&mut self, index: u8) {
        self.flags = (self.flags & 0x00FF) | (u16::from(index) << ENGINE_SHIFT);
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.opcode as u8;
        out[6..8].copy_from_slice(&self.flags.to_le_bytes());
        out[8..12].copy_from_slice(&self.src_rank.to_le_bytes());
        out[12..16].copy_from_slice(&self.payload_len.to_le_bytes());
        out[16..24].copy_from_slice(&self.tag.to_le_bytes());
        out[24..28].copy_from_slice(&self.imm.to_le_bytes());
        out[28..32].copy_from_slice(&self.rcomp.to_le_bytes());
        out[32..40].copy_from_slice(&self.xfer_id.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<FrameHeader> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Transport(format!(
                "short frame header: {} bytes",
                buf.len()
            )));
        }
        if buf[0..4] != MAGIC {
            return Err(Error::Transport(format!(
                "bad frame magic {:02x?}",
                &buf[0..4]
            )));
        }
        if buf[4] != VERSION {
            return Err(Error::Transport(format!(
                "unsupported frame version {}",
                buf[4]
            )));
        }
        let opcode = Opcode::from_u8(buf[5])
            .ok_or_else(|| Error::Transport(format!("unknown opcode {}", buf[5])))?;
        let mut b = &buf[6..HEADER_LEN];
        Ok(FrameHeader {
            opcode,
            flags: b.get_u16_le(),
            src_rank: b.get_u32_le(),
            payload_len: b.get_u32_le(),
            tag: b.get_u64_le(),
            imm: b.get_u32_le(),
            rcomp: b.get_u32_le(),
            xfer_id: b.get_u64_le(),
        })
    }
}

/// Decrements the owning device's in-flight frame count when dropped.
pub(crate) struct InflightGuard(Arc<AtomicUsize>);

impl InflightGuard {
    pub(crate) fn new(counter: &Arc<AtomicUsize>) -> Self {
        counter.fetch_add(1, Ordering::AcqRel);
        InflightGuard(counter.clone())
    }
}

impl Drop for InflightGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

pub enum Payload {
    Empty,
    Packet(Packet),
    Bytes(Bytes),
}

impl Deref for Payload {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        match self {
            Payload::Empty => &[],
            Payload::Packet(p) => p.as_slice(),
            Payload::Bytes(b) => b,
        }
    }
}

impl Payload {
    /// Converts to `Bytes`, copying only when the payload lives in a packet.
    pub fn to_bytes(&self) -> Bytes {
        match self {
            Payload::Empty => Bytes::new(),
            Payload::Packet(p) => Bytes::copy_from_slice(p.as_slice()),
            Payload::Bytes(b) => b.clone(),
        }
    }
}

pub struct Frame {
    pub header: FrameHeader,
    pub payload: Payload,
    pub(crate) guard: Option<InflightGuard>,
}

impl Frame {
    pub fn new(mut header: FrameHeader, payload: Payload) -> Self {
        header.payload_len = payload.len() as u32;
        Frame {
            header,
            payload,
            guard: None,
        }
    }

    /// Appends the encoded frame to `out`.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&self.payload);
    }

    pub fn to_vec(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(HEADER_LEN + self.payload.len());
        self.write_to(&mut v);
        v
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("header", &self.header)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

/// Incremental decoder for a byte stream of concatenated frames. A corrupt
/// header is fatal; the decoder never tries to resynchronize.
#[derive(Default)]
pub struct FrameDecoder {
    buf: BytesMut,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes buffered but not yet returned as a complete frame.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame>> {
        if self.buf.len() < HEADER_LEN {
            // Validate the magic early so garbage fails fast.
            let n = self.buf.len().min(4);
            if self.buf[..n] != MAGIC[..n] {
                return Err(Error::Transport(format!(
                    "bad frame magic {:02x?}",
                    &self.buf[..n]
                )));
            }
            return Ok(None);
        }
        let header = FrameHeader::decode(&self.buf[..HEADER_LEN])?;
        let len = header.payload_len as usize;
        if len > MAX_PAYLOAD {
            return Err(Error::Transport(format!("frame payload of {len} bytes")));
        }
        if self.buf.len() < HEADER_LEN + len {
            return Ok(None);
        }
        self.buf.advance(HEADER_LEN);
        let payload = if len == 0 {
            Payload::Empty
        } else {
            Payload::Bytes(self.buf.split_to(len).freeze())
        };
        Ok(Some(Frame {
            header,
            payload,
            guard: None,
        }))
    }
}
