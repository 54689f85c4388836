//! Binary mask file.
//!
//! ```text
//! "DOSSMASK"  magic, 8 bytes
//! u16         version
//! f64         alpha
//! f64         beta
//! u16 + bytes domain id (UTF-8)
//! u32         tensor count
//! per tensor (name order):
//!   u16 + bytes   UTF-8 name
//!   u64           element count n
//!   ⌈n/8⌉ bytes   bits, LSB-first; unused high bits of the last byte are 0
//! ```
//! Little-endian throughout. The finetune length is not stored; decoded masks
//! report the default.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bitvec::prelude::*;

use super::{Bits, DomainMask, PruneSpec};
use crate::error::{Error, Result};
use crate::model::checkpoint::Reader;

pub const MAGIC: &[u8; 8] = b"DOSSMASK";
pub const VERSION: u16 = 1;

fn push_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Input(format!("string too long: {s}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_mask(mask: &DomainMask) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&mask.spec.alpha.to_le_bytes());
    buf.extend_from_slice(&mask.spec.beta.to_le_bytes());
    push_str(&mut buf, &mask.domain_id)?;
    buf.extend_from_slice(&(mask.bits.len() as u32).to_le_bytes());
    for (name, bits) in &mask.bits {
        push_str(&mut buf, name)?;
        buf.extend_from_slice(&(bits.len() as u64).to_le_bytes());
        let mut raw = bits.as_raw_slice().to_vec();
        let tail = bits.len() % 8;
        if tail != 0 {
            *raw.last_mut().expect("non-empty") &= (1u8 << tail) - 1;
        }
        buf.extend_from_slice(&raw);
    }
    Ok(buf)
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<DomainMask> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "bad mask magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported mask version {version}")));
    }
    let alpha = r.f64()?;
    let beta = r.f64()?;
    let spec = PruneSpec::new(alpha, beta).map_err(|e| Error::format(path, e.to_string()))?;
    let id_len = r.u16()? as usize;
    let domain_id = r.string(id_len)?;
    let count = r.u32()?;
    let mut bits = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let n = usize::try_from(r.u64()?).map_err(|_| Error::format(path, "bitset too large"))?;
        let raw = r.take(n.div_ceil(8))?;
        if n % 8 != 0 && raw[raw.len() - 1] >> (n % 8) != 0 {
            return Err(Error::format(path, format!("{name}: bits set beyond length {n}")));
        }
        let mut bv: Bits = BitVec::from_slice(raw);
        bv.truncate(n);
        if bits.insert(name.clone(), bv).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;
    Ok(DomainMask::from_bits(domain_id, spec, bits))
}

pub fn save_mask(mask: &DomainMask, path: &Path) -> Result<()> {
    fs::write(path, encode_mask(mask)?).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<DomainMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn twelve_bit_mask() -> DomainMask {
        // bits 0, 2, 3, 8, 11 set
        let pattern = [1, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 1];
        let bv: Bits = pattern.iter().map(|&b| b == 1).collect();
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), bv);
        DomainMask::from_bits("med", PruneSpec::new(0.6, 0.8).unwrap(), map)
    }

    #[test]
    fn twelve_bit_payload_is_lsb_first() {
        let bytes = encode_mask(&twelve_bit_mask()).unwrap();
        let mut expected = b"DOSSMASK".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&0.6f64.to_le_bytes());
        expected.extend_from_slice(&0.8f64.to_le_bytes());
        expected.extend_from_slice(&[3, 0, b'm', b'e', b'd']);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&[1, 0, b'w']);
        expected.extend_from_slice(&12u64.to_le_bytes());
        // 0b0000_1101 = 0x0D, then bits 8 and 11 → 0b0000_1001 = 0x09
        expected.extend_from_slice(&[0x0D, 0x09]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_and_corruption() {
        let m = twelve_bit_mask();
        let bytes = encode_mask(&m).unwrap();
        let p = Path::new("m");
        assert_eq!(decode_mask(&bytes, p).unwrap(), m);
        assert!(matches!(decode_mask(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[3] = b'!';
        assert!(matches!(decode_mask(&bad, p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(decode_mask(&bad, p), Err(Error::Format { .. })));
        let mut bad = bytes;
        *bad.last_mut().unwrap() |= 0x80;
        assert!(matches!(decode_mask(&bad, p), Err(Error::Format { .. })));
    }
}
