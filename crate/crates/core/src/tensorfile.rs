//! The `SANW` named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SANW"            4 bytes magic
//! version   u32     currently 1
//! count     u32     number of tensors
//! per tensor:
//!   name_len u16, name (UTF-8)
//!   rank     u8, rank × u32 dims
//!   values   product(dims) × f32
//! ```
//!
//! Weight bundles, preprocessed tensor caches, optimizer moments and feature
//! stores all use this container.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SANW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has dims {dims:?} but {} values",
                values.len()
            )));
        }
        Ok(NamedTensor { name, dims, values })
    }

    /// Narrows `f64` values to `f32`.
    pub fn from_f64(name: impl Into<String>, dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(name, dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let payload: usize = tensors.iter().map(|t| t.values.len() * 4 + t.name.len() + 8).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Format("too many tensors for a u32 count".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{}`", t.name)));
        }
        let name_len = u16::try_from(t.name.len())
            .map_err(|_| Error::Format(format!("tensor name `{}` is too long", t.name)))?;
        let rank = u8::try_from(t.dims.len())
            .map_err(|_| Error::Format(format!("tensor `{}` has rank > 255", t.name)))?;
        if t.dims.iter().product::<usize>() != t.values.len() {
            return Err(Error::Shape(format!(
                "tensor `{}` dims {:?} disagree with {} values",
                t.name,
                t.dims,
                t.values.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(rank);
        for &d in &t.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} of `{}` exceeds u32", t.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated payload: needed {n} bytes for {what} at offset {}",
                self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?} (\"SANW\")"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let bytes = r.take(n, &format!("values of `{name}`"))?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, values });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn write_tensor_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor::new("conv1.weight", vec![3, 3, 3, 2], (0..54).map(|i| i as f32 * 0.5).collect()).unwrap(),
            NamedTensor::new("conv1.bias", vec![2], vec![-1.0, 2.5]).unwrap(),
            NamedTensor::new("empty", vec![0], vec![]).unwrap(),
        ]
    }

    #[test]
    fn header_layout_is_exact() {
        let t = vec![NamedTensor::new("ab", vec![2], vec![1.0, -2.0]).unwrap()];
        let bytes = encode(&t).unwrap();
        let mut expected = b"SANW".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip() {
        let t = sample();
        assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 2;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&sample()).unwrap();
        for cut in [3, 10, 20, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated") || err.contains("magic"), "{cut}: {err}");
        }
    }

    #[test]
    fn duplicate_names_rejected_both_ways() {
        let mut t = sample();
        t.push(t[1].clone());
        assert!(encode(&t).is_err());
        // Hand-build a file with a duplicate entry.
        let one = encode(&[t[1].clone()]).unwrap();
        let mut bytes = one.clone();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&one[12..]);
        assert!(decode(&bytes).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_round_trip(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..64),
                                name in "[a-z./_0-9]{1,20}") {
            let t = vec![NamedTensor::new(name, vec![vals.len()], vals).unwrap()];
            prop_assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
        }
    }
}
