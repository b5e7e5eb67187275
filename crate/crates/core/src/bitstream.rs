//! Bitstream container: fixed little-endian header followed by the coded
//! payload. The header carries everything the decoder needs besides the
//! weights file itself: geometry, transform depth, mixture count, the
//! quantizer gain, per-subband symbol bounds, and a digest of the weights
//! the stream was written under.

use crate::error::{Error, Result};
use crate::model::ModelCfg;

pub const STREAM_MAGIC: [u8; 4] = *b"WCCM";
pub const STREAM_VERSION: u16 = 1;
/// Cross-component taps were zeroed when this stream was written.
pub const FLAG_CONTEXT_DISABLED: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub flags: u16,
    pub orig_w: u32,
    pub orig_h: u32,
    pub padded_w: u32,
    pub padded_h: u32,
    pub levels: u8,
    pub mixtures: u8,
    pub delta: f32,
    pub weights_digest: u64,
    /// Closed symbol range per component and subband, coding order.
    pub bounds: [Vec<(i16, i16)>; 3],
}

impl Header {
    pub fn context_disabled(&self) -> bool {
        self.flags & FLAG_CONTEXT_DISABLED != 0
    }

    pub fn subband_count(&self) -> usize {
        3 * self.levels as usize + 1
    }

    fn validate(&self) -> Result<()> {
        if self.orig_w == 0 || self.orig_h == 0 {
            return Err(Error::Format("image dimensions must be nonzero".into()));
        }
        if !(1..=8).contains(&self.levels) || !(1..=8).contains(&self.mixtures) {
            return Err(Error::Format(format!(
                "levels {} or mixtures {} outside supported range",
                self.levels, self.mixtures
            )));
        }
        let step = 1u32 << self.levels;
        if self.padded_w < self.orig_w
            || self.padded_h < self.orig_h
            || self.padded_w % step != 0
            || self.padded_h % step != 0
        {
            return Err(Error::Format(format!(
                "padded size {}x{} does not cover {}x{} in multiples of {step}",
                self.padded_w, self.padded_h, self.orig_w, self.orig_h
            )));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 {
            return Err(Error::Format(format!("quantizer gain {} is invalid", self.delta)));
        }
        let n = self.subband_count();
        for comp in &self.bounds {
            if comp.len() != n {
                return Err(Error::Format(format!(
                    "expected {n} subband bounds per component, found {}",
                    comp.len()
                )));
            }
            for &(lo, hi) in comp {
                if lo > hi {
                    return Err(Error::Format(format!("symbol bounds {lo}..{hi} are inverted")));
                }
            }
        }
        Ok(())
    }
}

pub fn encode_stream(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    header.validate()?;
    let mut out = Vec::with_capacity(64 + header.subband_count() * 12 + payload.len());
    out.extend_from_slice(&STREAM_MAGIC);
    out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&header.flags.to_le_bytes());
    for v in [header.orig_w, header.orig_h, header.padded_w, header.padded_h] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(header.levels);
    out.push(header.mixtures);
    out.extend_from_slice(&header.delta.to_le_bytes());
    out.extend_from_slice(&header.weights_digest.to_le_bytes());
    for comp in &header.bounds {
        for &(lo, hi) in comp {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn parse_stream(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(4)? != STREAM_MAGIC {
        return Err(Error::Format("not a coded image stream".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != STREAM_VERSION {
        return Err(Error::Format(format!("unsupported stream version {version}")));
    }
    let flags = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    let mut dims = [0u32; 4];
    for d in &mut dims {
        *d = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    }
    let levels = r.take(1)?[0];
    let mixtures = r.take(1)?[0];
    let delta = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let weights_digest = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    if !(1..=8).contains(&levels) {
        return Err(Error::Format(format!("levels {levels} outside supported range")));
    }
    let n = 3 * levels as usize + 1;
    let mut bounds: [Vec<(i16, i16)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for comp in &mut bounds {
        comp.reserve(n);
        for _ in 0..n {
            let lo = i16::from_le_bytes(r.take(2)?.try_into().unwrap());
            let hi = i16::from_le_bytes(r.take(2)?.try_into().unwrap());
            comp.push((lo, hi));
        }
    }
    let payload_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let payload = r.take(payload_len)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes after payload: {} unread",
            bytes.len() - r.pos
        )));
    }
    let header = Header {
        flags,
        orig_w: dims[0],
        orig_h: dims[1],
        padded_w: dims[2],
        padded_h: dims[3],
        levels,
        mixtures,
        delta,
        weights_digest,
        bounds,
    };
    header.validate()?;
    Ok((header, payload))
}

/// Model settings implied by a parsed header; the rest of the configuration
/// is inferred from weight shapes at decode time.
pub fn header_cfg(header: &Header, base: &ModelCfg) -> ModelCfg {
    let mut cfg = base.clone();
    cfg.levels = header.levels as usize;
    cfg.mixtures = header.mixtures as usize;
    cfg.delta_init = header.delta;
    cfg
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("stream is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_header() -> Header {
        let bounds = |seed: i16| (0..13).map(|i| (-seed - i as i16, seed + 2 * i as i16)).collect();
        Header {
            flags: 0,
            orig_w: 100,
            orig_h: 60,
            padded_w: 112,
            padded_h: 64,
            levels: 4,
            mixtures: 3,
            delta: 0.0625,
            weights_digest: 0xDEAD_BEEF_0123_4567,
            bounds: [bounds(4), bounds(7), bounds(2)],
        }
    }

    #[test]
    fn roundtrip_preserves_header_and_payload() {
        let header = sample_header();
        let payload: Vec<u8> = (0..301u32).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = encode_stream(&header, &payload).unwrap();
        let (back, body) = parse_stream(&bytes).unwrap();
        assert_eq!(back, header);
        assert_eq!(body, &payload[..]);
    }

    #[test]
    fn flag_bit_marks_disabled_context() {
        let mut header = sample_header();
        assert!(!header.context_disabled());
        header.flags |= FLAG_CONTEXT_DISABLED;
        let bytes = encode_stream(&header, b"x").unwrap();
        let (back, _) = parse_stream(&bytes).unwrap();
        assert!(back.context_disabled());
    }

    #[test]
    fn malformed_streams_are_rejected() {
        let header = sample_header();
        let bytes = encode_stream(&header, b"payload").unwrap();

        let mut magic = bytes.clone();
        magic[0] = b'Z';
        assert!(parse_stream(&magic).is_err());

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(parse_stream(&version).is_err());

        assert!(parse_stream(&bytes[..bytes.len() - 2]).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(parse_stream(&trailing).is_err());

        let mut zero_dim = bytes;
        zero_dim[8] = 0;
        zero_dim[9] = 0;
        zero_dim[10] = 0;
        zero_dim[11] = 0;
        assert!(parse_stream(&zero_dim).is_err());
    }

    #[test]
    fn unpadded_geometry_is_rejected() {
        let mut header = sample_header();
        header.padded_w = 100;
        assert!(encode_stream(&header, b"").is_err());
        let mut inverted = sample_header();
        inverted.bounds[1][5] = (3, -3);
        assert!(encode_stream(&inverted, b"").is_err());
    }

    #[test]
    fn header_cfg_overrides_geometry_fields() {
        let mut header = sample_header();
        header.levels = 3;
        header.mixtures = 2;
        header.delta = 0.5;
        header.bounds = [vec![(0, 0); 10], vec![(0, 0); 10], vec![(0, 0); 10]];
        let cfg = header_cfg(&header, &ModelCfg::default());
        assert_eq!(cfg.levels, 3);
        assert_eq!(cfg.mixtures, 2);
        assert_eq!(cfg.delta_init, 0.5);
    }
}
