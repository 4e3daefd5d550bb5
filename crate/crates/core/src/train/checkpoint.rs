//! `ELFCKPT1` files: magic, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, a u8 rank, u32 extents and little-endian f32
//! values, in name order; a trailing u32 CRC32 covers the value bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ELFCKPT1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::from(&MAGIC[..]);
    let count = u32::try_from(store.len()).map_err(|_| bad("too many tensors"))?;
    out.extend(count.to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| bad(format!("rank too high: {name}")))?;
        out.extend(len.to_le_bytes());
        out.extend(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend(u32::try_from(d).map_err(|_| bad(format!("extent too large: {name}")))?.to_le_bytes());
        }
        let start = out.len();
        for v in t.data() {
            out.extend((v.as_f64() as f32).to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend(crc.finalize().to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let count = r.u32()?;
    let mut store = ParamStore::default();
    let mut crc = crc32fast::Hasher::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("name is not UTF-8"))?.to_string();
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(bad(format!("tensor `{name}` out of order")));
        }
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extent overflow"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("extent overflow"))?)?;
        crc.update(raw);
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("four bytes")) as f64))
            .collect();
        store.insert(name.clone(), Tensor::new(shape, data)?);
        prev = Some(name);
    }
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    if stored != crc.finalize() {
        return Err(bad("CRC mismatch"));
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Data { path: path.to_path_buf(), msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::default();
        s.insert("b.weight", random(&[2, 3, 3, 3], 1).cast());
        s.insert("a.bias", random(&[2], 2).cast());
        s.insert("scalar", Tensor::new(vec![], vec![1.5]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode(&s).unwrap();
        let back: ParamStore<f32> = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn layout_is_as_documented() {
        let mut s = ParamStore::<f32>::default();
        s.insert("x", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let bytes = encode(&s).unwrap();
        let mut expected = b"ELFCKPT1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.push(b'x');
        expected.push(1);
        expected.extend(2u32.to_le_bytes());
        let payload: Vec<u8> = [1.0f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        expected.extend(&payload);
        expected.extend(crc32fast::hash(&payload).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample()).unwrap();
        let mut flipped = bytes.clone();
        let last_payload = bytes.len() - 5;
        flipped[last_payload] ^= 1;
        assert!(decode::<f32>(&flipped).is_err());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode::<f32>(&magic).is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save(&sample(), &a).unwrap();
        save(&load::<f32>(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
}
