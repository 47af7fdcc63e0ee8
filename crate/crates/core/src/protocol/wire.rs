//! Self-delimiting binary frames for federation messages.
//!
//! Frame layout, little-endian throughout: magic `FRL1` | version u8 |
//! message type u8 | header length u16 | UTF-8 JSON header | payload length
//! u32 | payload. Update and broadcast frames carry their metadata in the
//! JSON header; control frames carry JSON in the payload and an empty
//! header. Readers validate every declared length before allocating and
//! return errors, never panics, on malformed input.

use crate::compression::{SparsePayload, SparseValues};
use crate::error::{Error, Result};
use crate::privacy::MaskedPayload;
use serde::{Deserialize, Serialize};
use std::io::Read;

pub const MAGIC: [u8; 4] = *b"FRL1";
pub const VERSION: u8 = 1;

pub const MSG_DENSE_UPDATE: u8 = 1;
pub const MSG_SPARSE_UPDATE: u8 = 2;
pub const MSG_BROADCAST: u8 = 3;
pub const MSG_CONTROL: u8 = 4;

/// Cap on the declared payload length; guards readers against hostile
/// length fields.
pub const MAX_PAYLOAD_BYTES: u32 = 1 << 26;

/// Metadata accompanying a client update. `masked` selects the fixed-point
/// word payload, `quantized` the code-valued sparse payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateHeader {
    pub round: u64,
    pub client_id: u64,
    pub n_k: u64,
    pub d: u32,
    pub clipped: bool,
    pub sigma: f64,
    pub masked: bool,
    pub quantized: bool,
}

/// Metadata accompanying a global parameter broadcast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BroadcastHeader {
    pub round: u64,
    pub d: u32,
    pub n_total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Hello,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlHeader {
    pub kind: ControlKind,
    pub client_id: u64,
}

/// One decoded federation message.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    DenseUpdate {
        header: UpdateHeader,
        values: Vec<f64>,
    },
    SparseUpdate {
        header: UpdateHeader,
        payload: SparsePayload,
    },
    MaskedUpdate {
        header: UpdateHeader,
        payload: MaskedPayload,
    },
    Broadcast {
        header: BroadcastHeader,
        params: Vec<f64>,
    },
    Control(ControlHeader),
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(value).map_err(|e| Error::schema(format!("header serialization: {e}")))
}

fn from_json<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::schema(format!("header: {e}")))
}

fn dense_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn sparse_bytes(p: &SparsePayload) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(p.indices.len() as u32).to_le_bytes());
    match &p.values {
        SparseValues::Float(vals) => {
            for (i, v) in p.indices.iter().zip(vals) {
                out.extend_from_slice(&i.to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        SparseValues::Quantized {
            scale,
            offset,
            codes,
        } => {
            out.extend_from_slice(&scale.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            for (i, c) in p.indices.iter().zip(codes) {
                out.extend_from_slice(&i.to_le_bytes());
                out.push(*c);
            }
        }
    }
    out
}

fn expect_dim(header_d: u32, actual: usize, what: &str) -> Result<()> {
    if header_d as usize != actual {
        return Err(Error::protocol(format!(
            "{what} length {actual} does not match declared dimension {header_d}"
        )));
    }
    Ok(())
}

/// Serializes a frame. Flag and length consistency between header and
/// payload is enforced here so every emitted frame decodes back to itself.
pub fn encode(frame: &Frame) -> Result<Vec<u8>> {
    let (msg_type, header, payload) = match frame {
        Frame::DenseUpdate { header, values } => {
            if header.masked || header.quantized {
                return Err(Error::protocol(
                    "dense update header must not set masked or quantized",
                ));
            }
            expect_dim(header.d, values.len(), "dense update")?;
            (MSG_DENSE_UPDATE, to_json(header)?, dense_bytes(values))
        }
        Frame::MaskedUpdate { header, payload } => {
            if !header.masked || header.quantized {
                return Err(Error::protocol(
                    "masked update header must set masked and not quantized",
                ));
            }
            expect_dim(header.d, payload.len(), "masked update")?;
            (MSG_DENSE_UPDATE, to_json(header)?, payload.to_wire_bytes())
        }
        Frame::SparseUpdate { header, payload } => {
            payload.validate()?;
            let quantized = matches!(payload.values, SparseValues::Quantized { .. });
            if header.masked || header.quantized != quantized {
                return Err(Error::protocol(
                    "sparse update header flags do not match the payload",
                ));
            }
            if header.d != payload.d {
                return Err(Error::protocol(format!(
                    "sparse update dimension {} does not match declared dimension {}",
                    payload.d, header.d
                )));
            }
            (MSG_SPARSE_UPDATE, to_json(header)?, sparse_bytes(payload))
        }
        Frame::Broadcast { header, params } => {
            expect_dim(header.d, params.len(), "broadcast")?;
            (MSG_BROADCAST, to_json(header)?, dense_bytes(params))
        }
        Frame::Control(header) => (MSG_CONTROL, Vec::new(), to_json(header)?),
    };
    if header.len() > u16::MAX as usize {
        return Err(Error::framing("header exceeds the u16 length field"));
    }
    if payload.len() > MAX_PAYLOAD_BYTES as usize {
        return Err(Error::framing(format!(
            "payload length {} exceeds the {} byte cap",
            payload.len(),
            MAX_PAYLOAD_BYTES
        )));
    }
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg_type);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::framing("truncated frame"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16_le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64_le(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn decode_dense_values(payload: &[u8], d: u32) -> Result<Vec<f64>> {
    if payload.len() != d as usize * 8 {
        return Err(Error::framing(format!(
            "dense payload of {} bytes does not match dimension {d}",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn decode_sparse_payload(payload: &[u8], d: u32, quantized: bool) -> Result<SparsePayload> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
    };
    let count = c.u32_le()? as usize;
    let entry = if quantized { 5 } else { 12 };
    let fixed = if quantized { 16 } else { 0 };
    let expected = 4 + fixed + count * entry;
    if payload.len() != expected {
        return Err(Error::framing(format!(
            "sparse payload of {} bytes does not match its {count} declared entries",
            payload.len()
        )));
    }
    let mut indices = Vec::with_capacity(count);
    let values = if quantized {
        let scale = c.f64_le()?;
        let offset = c.f64_le()?;
        let mut codes = Vec::with_capacity(count);
        for _ in 0..count {
            indices.push(c.u32_le()?);
            codes.push(c.u8()?);
        }
        SparseValues::Quantized {
            scale,
            offset,
            codes,
        }
    } else {
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            indices.push(c.u32_le()?);
            vals.push(c.f64_le()?);
        }
        SparseValues::Float(vals)
    };
    let p = SparsePayload { d, indices, values };
    p.validate()?;
    Ok(p)
}

/// Parses one complete frame from a byte buffer. Trailing bytes are an
/// error; frames are self-delimiting, so streams use [`read_frame`].
pub fn decode(bytes: &[u8]) -> Result<Frame> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::framing("bad magic"));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::framing(format!("unsupported version {version}")));
    }
    let msg_type = c.u8()?;
    let header_len = c.u16_le()? as usize;
    let header_bytes = c.take(header_len)?;
    let payload_len = c.u32_le()?;
    if payload_len > MAX_PAYLOAD_BYTES {
        return Err(Error::framing(format!(
            "declared payload length {payload_len} exceeds the {MAX_PAYLOAD_BYTES} byte cap"
        )));
    }
    let payload = c.take(payload_len as usize)?;
    if c.remaining() != 0 {
        return Err(Error::framing("trailing bytes after frame"));
    }
    match msg_type {
        MSG_DENSE_UPDATE => {
            let header: UpdateHeader = from_json(header_bytes)?;
            if header.quantized {
                return Err(Error::protocol("quantized flag on a dense update"));
            }
            if header.masked {
                if payload.len() != header.d as usize * 8 {
                    return Err(Error::framing(format!(
                        "masked payload of {} bytes does not match dimension {}",
                        payload.len(),
                        header.d
                    )));
                }
                let payload = MaskedPayload::from_wire_bytes(payload)?;
                Ok(Frame::MaskedUpdate { header, payload })
            } else {
                let values = decode_dense_values(payload, header.d)?;
                Ok(Frame::DenseUpdate { header, values })
            }
        }
        MSG_SPARSE_UPDATE => {
            let header: UpdateHeader = from_json(header_bytes)?;
            if header.masked {
                return Err(Error::protocol("masked flag on a sparse update"));
            }
            let payload = decode_sparse_payload(payload, header.d, header.quantized)?;
            Ok(Frame::SparseUpdate { header, payload })
        }
        MSG_BROADCAST => {
            let header: BroadcastHeader = from_json(header_bytes)?;
            let params = decode_dense_values(payload, header.d)?;
            Ok(Frame::Broadcast { header, params })
        }
        MSG_CONTROL => {
            if !header_bytes.is_empty() {
                return Err(Error::framing("control frames carry an empty header"));
            }
            Ok(Frame::Control(from_json(payload)?))
        }
        t => Err(Error::framing(format!("unknown message type {t}"))),
    }
}

fn read_exact_framed<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::framing("truncated frame")
        } else {
            Error::Io(e)
        }
    })
}

/// Reads one frame's exact bytes off a stream, using the two length fields
/// to find the boundary. Returns the verbatim frame for later decoding.
pub fn read_frame_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut head = [0u8; 8];
    read_exact_framed(r, &mut head)?;
    if head[0..4] != MAGIC {
        return Err(Error::framing("bad magic"));
    }
    if head[4] != VERSION {
        return Err(Error::framing(format!("unsupported version {}", head[4])));
    }
    let header_len = u16::from_le_bytes([head[6], head[7]]) as usize;
    let mut frame = head.to_vec();
    let mut header = vec![0u8; header_len];
    read_exact_framed(r, &mut header)?;
    frame.extend_from_slice(&header);
    let mut len = [0u8; 4];
    read_exact_framed(r, &mut len)?;
    frame.extend_from_slice(&len);
    let payload_len = u32::from_le_bytes(len);
    if payload_len > MAX_PAYLOAD_BYTES {
        return Err(Error::framing(format!(
            "declared payload length {payload_len} exceeds the {MAX_PAYLOAD_BYTES} byte cap"
        )));
    }
    let mut payload = vec![0u8; payload_len as usize];
    read_exact_framed(r, &mut payload)?;
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Reads and parses one frame from a stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame> {
    decode(&read_frame_bytes(r)?)
}
