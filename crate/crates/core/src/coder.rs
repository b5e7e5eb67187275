//! Byte-oriented range coder over 16-bit integer frequency tables.
//!
//! Carry handling follows the classic low/cache/cache-size scheme: the
//! encoder tracks a 64-bit low accumulator and releases bytes once a carry
//! can no longer reach them. The decoder mirrors renormalization exactly,
//! so for a valid stream it consumes precisely the bytes the encoder
//! emitted; a short read or an out-of-range dividend means corruption.

use crate::entropy::CDF_TOTAL;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Codes the symbol at `index` of the cumulative table.
    pub fn encode(&mut self, cdf: &[u32], index: usize) -> Result<()> {
        if index + 1 >= cdf.len() {
            return Err(Error::Numeric(format!(
                "symbol index {index} outside table of {}",
                cdf.len().saturating_sub(1)
            )));
        }
        let start = cdf[index];
        let span = cdf[index + 1] - cdf[index];
        debug_assert!(span > 0 && *cdf.last().unwrap() == CDF_TOTAL);
        let r = self.range / CDF_TOTAL;
        self.low += start as u64 * r as u64;
        self.range = r * span;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
        Ok(())
    }

    /// Flushes the accumulator; the result is the complete payload.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        // low + range stays <= 2^32 until the first emitting flush, so a
        // carry can never reach the lead byte: it is always zero.
        debug_assert_eq!(self.out.first(), Some(&0));
        self.out
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        RangeEncoder::new()
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<RangeDecoder<'a>> {
        if bytes.len() < 5 {
            return Err(Error::Format(format!("payload of {} bytes is too short", bytes.len())));
        }
        if bytes[0] != 0 {
            return Err(Error::Format("corrupted payload: nonzero lead byte".into()));
        }
        let mut d = RangeDecoder { code: 0, range: u32::MAX, bytes, pos: 1 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self
            .bytes
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Format("payload truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Decodes one symbol index under the cumulative table.
    pub fn decode(&mut self, cdf: &[u32]) -> Result<usize> {
        let r = self.range / CDF_TOTAL;
        let dv = self.code / r;
        if dv >= CDF_TOTAL {
            return Err(Error::Format("corrupted payload: dividend outside table".into()));
        }
        let index = cdf.partition_point(|&c| c <= dv) - 1;
        self.code -= cdf[index] * r;
        self.range = r * (cdf[index + 1] - cdf[index]);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(index)
    }

    /// Bytes consumed so far; equals the payload length after a clean run.
    pub fn consumed(&self) -> usize {
        self.pos
    }
}

/// Wraps coder output in a checksum frame so that any corruption of the
/// payload is caught before symbol decoding starts.
pub fn seal_payload(rc_bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + rc_bytes.len());
    out.extend_from_slice(&crc32(rc_bytes).to_le_bytes());
    out.extend_from_slice(rc_bytes);
    out
}

/// Verifies the checksum frame and returns the coder bytes.
pub fn open_payload(payload: &[u8]) -> Result<&[u8]> {
    if payload.len() < 4 {
        return Err(Error::Format("payload too short for its checksum".into()));
    }
    let stored = u32::from_le_bytes(payload[..4].try_into().unwrap());
    let rc = &payload[4..];
    let got = crc32(rc);
    if stored != got {
        return Err(Error::Format(format!(
            "payload checksum mismatch: stored {stored:#010x}, computed {got:#010x}"
        )));
    }
    Ok(rc)
}

/// Plain IEEE reflected CRC-32.
pub fn crc32(bytes: &[u8]) -> u32 {
    const POLY: u32 = 0xEDB8_8320;
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (POLY & mask);
        }
    }
    !crc
}
