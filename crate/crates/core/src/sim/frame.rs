//! Compact binary frames for the in-network links.
//!
//! ```text
//! frame   = varint(body_len) body
//! body    = 0x01 varint(n) varint(base_ms) record*n
//! record  = varint(record_id) varint(sensor_idx) zigzag(t_ms - base_ms)
//!           kind:u8 zigzag(value) [zigzag(min) zigzag(max) varint(count)]
//! ```
//!
//! Values are scaled integers with four decimal places; the bracketed part
//! appears only for aggregate records.

use thiserror::Error;

use super::process::{OutRecord, RecordKind};
use crate::time::Timestamp;

pub const FRAME_VERSION: u8 = 1;
pub const VALUE_DECIMALS: u32 = 4;
const SCALE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame truncated")]
    Truncated,
    #[error("unsupported frame version {0}")]
    Version(u8),
    #[error("unknown record kind {0}")]
    Kind(u8),
    #[error("varint overflow")]
    Overflow,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

pub fn scale_value(v: f64) -> i64 {
    (v * SCALE).round() as i64
}

pub fn unscale_value(n: i64) -> f64 {
    n as f64 / SCALE
}

/// Exact decimal text of a scaled value, e.g. 98000 -> "9.8".
pub fn scaled_to_decimal(n: i64) -> String {
    let sign = if n < 0 { "-" } else { "" };
    let abs = n.unsigned_abs();
    let int = abs / SCALE as u64;
    let frac = abs % SCALE as u64;
    if frac == 0 {
        return format!("{sign}{int}");
    }
    let digits = format!("{:0width$}", frac, width = VALUE_DECIMALS as usize);
    format!("{sign}{int}.{}", digits.trim_end_matches('0'))
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn byte(&mut self) -> Result<u8, FrameError> {
        let b = *self.buf.get(self.pos).ok_or(FrameError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn varint(&mut self) -> Result<u64, FrameError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.byte()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(FrameError::Overflow)
    }

    fn zigzag(&mut self) -> Result<i64, FrameError> {
        self.varint().map(unzigzag)
    }
}

pub fn encode_frame(records: &[OutRecord]) -> Vec<u8> {
    let base = records.iter().map(|r| r.t.0).min().unwrap_or(0);
    let mut body = vec![FRAME_VERSION];
    put_varint(&mut body, records.len() as u64);
    put_varint(&mut body, base as u64);
    for r in records {
        put_varint(&mut body, r.record_id);
        put_varint(&mut body, u64::from(r.sensor_idx));
        put_varint(&mut body, zigzag(r.t.0 - base));
        match r.kind {
            RecordKind::Raw => {
                body.push(0);
                put_varint(&mut body, zigzag(scale_value(r.value)));
            }
            RecordKind::Aggregate => {
                body.push(1);
                put_varint(&mut body, zigzag(scale_value(r.value)));
                put_varint(&mut body, zigzag(scale_value(r.min)));
                put_varint(&mut body, zigzag(scale_value(r.max)));
                put_varint(&mut body, u64::from(r.count));
            }
        }
    }
    let mut out = Vec::with_capacity(body.len() + 2);
    put_varint(&mut out, body.len() as u64);
    out.extend(body);
    out
}

/// Decodes a frame. Values come back quantized to four decimals.
pub fn decode_frame(buf: &[u8]) -> Result<Vec<OutRecord>, FrameError> {
    let mut c = Cursor { buf, pos: 0 };
    let len = c.varint()? as usize;
    let body_start = c.pos;
    if buf.len() - body_start < len {
        return Err(FrameError::Truncated);
    }
    if buf.len() - body_start > len {
        return Err(FrameError::Trailing(buf.len() - body_start - len));
    }
    let version = c.byte()?;
    if version != FRAME_VERSION {
        return Err(FrameError::Version(version));
    }
    let n = c.varint()?;
    let base = c.varint()? as i64;
    let mut out = Vec::new();
    for _ in 0..n {
        let record_id = c.varint()?;
        let sensor_idx = c.varint()? as u32;
        let t = Timestamp(base + c.zigzag()?);
        let kind = c.byte()?;
        let value = unscale_value(c.zigzag()?);
        let rec = match kind {
            0 => OutRecord {
                record_id,
                sensor_idx,
                t,
                kind: RecordKind::Raw,
                value,
                min: value,
                max: value,
                count: 1,
            },
            1 => {
                let min = unscale_value(c.zigzag()?);
                let max = unscale_value(c.zigzag()?);
                let count = c.varint()? as u32;
                OutRecord {
                    record_id,
                    sensor_idx,
                    t,
                    kind: RecordKind::Aggregate,
                    value,
                    min,
                    max,
                    count,
                }
            }
            k => return Err(FrameError::Kind(k)),
        };
        out.push(rec);
    }
    if c.pos != buf.len() {
        return Err(FrameError::Trailing(buf.len() - c.pos));
    }
    Ok(out)
}
