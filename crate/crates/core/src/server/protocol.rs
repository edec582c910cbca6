//! Binary framing between workers and parameter servers.
//!
//! All integers and values are little-endian. Requests:
//!
//! ```text
//! [u32 frame_len][u8 opcode][u8 vtype][u32 n_ids][n_ids x u64 id]
//! PUT only:                                     [u32 D][n_ids x D x f32]
//! ```
//!
//! `frame_len` counts the bytes after itself. Opcodes: 1 = GET, 2 = PUT,
//! 3 = SHUTDOWN, 4 = STATS. Responses are `[u32 len][u8 status][payload]`:
//!
//! - GET ok: `[u32 n][u32 D][n x D x f32]`
//! - PUT ok or partial: `[u32 n_rejected][n_rejected x u64 id]`
//! - STATS ok: `key=value` lines
//! - error: UTF-8 message

use std::io::{self, Read, Write};

use crate::embed::Value;

pub const OP_GET: u8 = 1;
pub const OP_PUT: u8 = 2;
pub const OP_SHUTDOWN: u8 = 3;
pub const OP_STATS: u8 = 4;

pub const STATUS_OK: u8 = 0;
pub const STATUS_PARTIAL: u8 = 1;
pub const STATUS_ERROR: u8 = 2;

/// Frames larger than this are refused and skipped.
pub const MAX_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Get { vtype: u8, ids: Vec<u64> },
    Put { vtype: u8, ids: Vec<u64>, dim: u32, values: Vec<Value> },
    Shutdown,
    Stats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u8,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn error(message: impl Into<String>) -> Self {
        Self {
            status: STATUS_ERROR,
            payload: message.into().into_bytes(),
        }
    }

    pub fn ok(payload: Vec<u8>) -> Self {
        Self {
            status: STATUS_OK,
            payload,
        }
    }

    pub fn rows(n: usize, dim: usize, values: &[Value]) -> Self {
        let mut p = Vec::with_capacity(8 + values.len() * 4);
        p.extend_from_slice(&(n as u32).to_le_bytes());
        p.extend_from_slice(&(dim as u32).to_le_bytes());
        for v in values {
            p.extend_from_slice(&v.to_le_bytes());
        }
        Self::ok(p)
    }

    pub fn put_ack(rejected: &[u64]) -> Self {
        let mut p = Vec::with_capacity(4 + rejected.len() * 8);
        p.extend_from_slice(&(rejected.len() as u32).to_le_bytes());
        for id in rejected {
            p.extend_from_slice(&id.to_le_bytes());
        }
        Self {
            status: if rejected.is_empty() { STATUS_OK } else { STATUS_PARTIAL },
            payload: p,
        }
    }

    pub fn message(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    /// Decode a GET payload into `(n, dim, values)`.
    pub fn decode_rows(&self) -> Result<(usize, usize, Vec<Value>), String> {
        self.expect_ok()?;
        let mut c = Cursor::new(&self.payload);
        let n = c.u32()? as usize;
        let dim = c.u32()? as usize;
        let values = c.values(n * dim)?;
        c.finish()?;
        Ok((n, dim, values))
    }

    /// Decode a PUT acknowledgment into the list of rejected ids.
    pub fn decode_put_ack(&self) -> Result<Vec<u64>, String> {
        if self.status == STATUS_ERROR {
            return Err(self.message());
        }
        let mut c = Cursor::new(&self.payload);
        let n = c.u32()? as usize;
        let ids = c.ids(n)?;
        c.finish()?;
        Ok(ids)
    }

    pub fn expect_ok(&self) -> Result<(), String> {
        match self.status {
            STATUS_OK => Ok(()),
            STATUS_ERROR => Err(self.message()),
            other => Err(format!("unexpected status {other}")),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&(self.payload.len() as u32 + 1).to_le_bytes())?;
        w.write_all(&[self.status])?;
        w.write_all(&self.payload)
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let body = read_frame(r)?.map_err(|len| io::Error::new(io::ErrorKind::InvalidData, format!("response frame of {len} bytes")))?;
        let (&status, payload) = body
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty response frame"))?;
        Ok(Self {
            status,
            payload: payload.to_vec(),
        })
    }
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let (op, vtype, ids): (u8, u8, &[u64]) = match self {
            Request::Get { vtype, ids } => (OP_GET, *vtype, ids),
            Request::Put { vtype, ids, .. } => (OP_PUT, *vtype, ids),
            Request::Shutdown => (OP_SHUTDOWN, 0, &[]),
            Request::Stats => (OP_STATS, 0, &[]),
        };
        let mut body = Vec::with_capacity(6 + ids.len() * 8);
        body.push(op);
        body.push(vtype);
        body.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        for id in ids {
            body.extend_from_slice(&id.to_le_bytes());
        }
        if let Request::Put { dim, values, .. } = self {
            body.extend_from_slice(&dim.to_le_bytes());
            body.reserve(values.len() * 4);
            for v in values {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame
    }

    /// Parse a frame body (everything after `frame_len`).
    pub fn decode(body: &[u8]) -> Result<Self, String> {
        let mut c = Cursor::new(body);
        let op = c.u8()?;
        let vtype = c.u8()?;
        let n = c.u32()? as usize;
        let ids = c.ids(n)?;
        let req = match op {
            OP_GET => Request::Get { vtype, ids },
            OP_PUT => {
                let dim = c.u32()?;
                let values = c.values(n * dim as usize)?;
                Request::Put { vtype, ids, dim, values }
            }
            OP_SHUTDOWN => Request::Shutdown,
            OP_STATS => Request::Stats,
            other => return Err(format!("unknown opcode {other}")),
        };
        c.finish()?;
        Ok(req)
    }
}

/// Read one length-prefixed frame. `Ok(Err(len))` means the frame exceeded
/// [`MAX_FRAME`] and its bytes were discarded so the stream stays aligned.
pub fn read_frame(r: &mut impl Read) -> io::Result<Result<Vec<u8>, u32>> {
    read_frame_limited(r, MAX_FRAME)
}

pub fn read_frame_limited(r: &mut impl Read, max: u32) -> io::Result<Result<Vec<u8>, u32>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > max {
        io::copy(&mut r.take(len as u64), &mut io::sink())?;
        return Ok(Err(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Ok(body))
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated frame: need {n} bytes at offset {}, have {}", self.at, self.buf.len() - self.at)
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn ids(&mut self, n: usize) -> Result<Vec<u64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("id count overflows")?)?;
        Ok(raw.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn values(&mut self, n: usize) -> Result<Vec<Value>, String> {
        let raw = self.take(n.checked_mul(4).ok_or("value count overflows")?)?;
        Ok(raw.chunks_exact(4).map(|b| Value::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<(), String> {
        if self.at == self.buf.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes in frame", self.buf.len() - self.at))
        }
    }
}
