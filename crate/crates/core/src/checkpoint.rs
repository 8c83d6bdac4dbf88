//! Named-tensor archive.
//!
//! Little-endian layout:
//!
//! ```text
//! "P3DC"            4 bytes magic
//! version           u32 (= 1)
//! count             u32
//! count × {
//!     name_len      u32
//!     name          name_len bytes, UTF-8
//!     rank          u8
//!     dims          rank × u64
//!     data          Π dims × f32
//! }
//! checksum          u64, FNV-1a over every preceding byte
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"P3DC";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::TensorMismatch {
                name,
                detail: format!("dims {dims:?} hold {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { name, dims, data })
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes());
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{}`", t.name)));
        }
        if t.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor `{}` has rank {}", t.name, t.dims.len())));
        }
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::TensorMismatch {
                name: t.name.clone(),
                detail: "dims disagree with data length".into(),
            });
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a P3DC checkpoint".into()));
    }
    if bytes.len() < 12 + 8 {
        return Err(Error::Format("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64("dims")?).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(len, &format!("data of `{name}`"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} unexpected trailing bytes", body.len() - r.pos)));
    }
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != fnv1a64(body) {
        return Err(Error::Format("checksum mismatch".into()));
    }
    Ok(tensors)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Checksum of an archive's tensor payload, as stored in its trailer.
pub fn payload_hash(tensors: &[NamedTensor]) -> Result<u64> {
    let bytes = encode(tensors)?;
    Ok(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor::new("a.weight", vec![2, 1, 1, 1, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, -0.0, 7.0]).unwrap(),
            NamedTensor::new("a.bn.gamma", vec![2], vec![1.0, 1.0]).unwrap(),
            NamedTensor::new("scalar", vec![], vec![42.0]).unwrap(),
        ]
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"P3DC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
        assert_eq!(bytes[24], 5);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let good = encode(&sample()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(m)) if m.contains("magic")));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(m)) if m.contains("version")));

        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(decode(&bad).is_err());

        for cut in [5, 13, good.len() - 9, good.len() - 1] {
            assert!(decode(&good[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut t = sample();
        t.push(t[0].clone());
        assert!(encode(&t).is_err());

        // Hand-assemble an archive with a duplicate to exercise the reader.
        let one = encode(&sample()[1..2]).unwrap();
        let entry = &one[12..one.len() - 8];
        let mut body = Vec::new();
        body.extend_from_slice(b"P3DC");
        body.extend_from_slice(&1u32.to_le_bytes());
        body.extend_from_slice(&2u32.to_le_bytes());
        body.extend_from_slice(entry);
        body.extend_from_slice(entry);
        let sum = fnv1a64(&body);
        body.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(decode(&body), Err(Error::Format(m)) if m.contains("duplicate")));
    }
}
