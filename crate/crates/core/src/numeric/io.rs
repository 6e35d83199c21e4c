//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "HMCTCPRM"
//! version  u32       1
//! count    u32       number of records
//! record*  count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim × u64)
//!   values   product(dims) × f64 (IEEE-754 little-endian)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 8] = b"HMCTCPRM";
pub const PARAM_VERSION: u32 = 1;

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 8);
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != PARAM_MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.u32()?;
    if version != PARAM_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = cur.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| e.to_string())?
            .to_owned();
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or("overflow")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        store
            .insert(Parameter::new(name, value))
            .map_err(|e| e.to_string())?;
    }
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_params(store))
        .map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_params(&bytes).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 1..3),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(crate::numeric::param::splitmix64(seed + i as u64) >> 2))
                .collect();
            let mut store = ParamStore::new();
            store.insert(Parameter::new("enc.l1.fwd.w_in", Tensor::new(dims.clone(), data).unwrap())).unwrap();
            store.insert(Parameter::new("head.b", Tensor::full(&[3], -0.0))).unwrap();
            let back = decode_params(&encode_params(&store)).unwrap();
            for (a, b) in store.iter().zip(back.iter()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.value.shape(), b.value.shape());
                let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.insert(Parameter::new("w", Tensor::full(&[1], 1.0))).unwrap();
        let bytes = encode_params(&store);
        assert_eq!(&bytes[..8], b"HMCTCPRM");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        // name_len + "w" + ndim + dim + value
        assert_eq!(bytes.len(), 16 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(&bytes[bytes.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut store = ParamStore::new();
        store.insert(Parameter::new("w", Tensor::full(&[4], 1.0))).unwrap();
        let bytes = encode_params(&store);
        assert!(decode_params(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_params(b"NOTMAGIC\x01\0\0\0\0\0\0\0").is_err());
    }
}
