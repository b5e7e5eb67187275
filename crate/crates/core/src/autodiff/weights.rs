//! Binary container for model weights and its digest.
//!
//! Layout, all little-endian: magic "WCCW", version u16, entry count u32,
//! then per entry: name length u16, UTF-8 name, rank u8, extents u32 each,
//! raw f32 data. Entry order is the registry's insertion order, which makes
//! the encoding canonical for a given model build.

use std::path::Path;

use super::registry::ParamRegistry;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"WCCW";
pub const WEIGHTS_VERSION: u16 = 1;

pub fn encode_weights(reg: &ParamRegistry) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for (name, tensor) in reg.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamRegistry> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights container".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let mut reg = ParamRegistry::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("weight name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        reg.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes in weights container: {} unread",
            bytes.len() - r.pos
        )));
    }
    Ok(reg)
}

pub fn save_weights(reg: &ParamRegistry, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(reg)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ParamRegistry> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// FNV-1a over the canonical encoding. Stored in bitstream headers so a
/// decoder can refuse streams produced under different weights.
pub fn weights_digest(reg: &ParamRegistry) -> u64 {
    fnv1a64(&encode_weights(reg))
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("weights container is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_registry() -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        reg.insert("net.a.kernel", Tensor::new(vec![2, 1, 3, 3], (0..18).map(|v| v as f32 * 0.25).collect()).unwrap()).unwrap();
        reg.insert("net.a.bias", Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap()).unwrap();
        reg.insert("gain", Tensor::new(vec![], vec![0.0]).unwrap()).unwrap();
        reg
    }

    #[test]
    fn roundtrip_preserves_order_shapes_and_values() {
        let reg = sample_registry();
        let bytes = encode_weights(&reg);
        let back = decode_weights(&bytes).unwrap();
        let names: Vec<_> = back.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["net.a.kernel", "net.a.bias", "gain"]);
        for (name, t) in reg.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(b.shape(), t.shape());
            assert_eq!(b.data(), t.data());
        }
    }

    #[test]
    fn digest_tracks_content() {
        let reg = sample_registry();
        let d1 = weights_digest(&reg);
        let mut reg2 = sample_registry();
        reg2.get_mut("gain").unwrap().data_mut()[0] = 1.0;
        assert_ne!(d1, weights_digest(&reg2));
        assert_eq!(d1, weights_digest(&sample_registry()));
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let reg = sample_registry();
        let bytes = encode_weights(&reg);
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(decode_weights(&wrong_magic).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_weights(&trailing).is_err());
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wts");
        let reg = sample_registry();
        save_weights(&reg, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(weights_digest(&back), weights_digest(&reg));
    }
}
