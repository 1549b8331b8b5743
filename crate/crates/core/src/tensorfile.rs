//! `MGT1` tensor container.
//!
//! ```text
//! "MGT1" | u32 entry count
//! per entry: u16 name length | name (UTF-8) | u8 dtype | u8 rank | rank x u64 dims | data
//! u64 metadata length | metadata (UTF-8 JSON)
//! ```
//!
//! All integers and data are little-endian. dtype: 0 = f32, 1 = f64, 2 = i64.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MGT1";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?}: {message}")]
    Shape { name: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(TensorError::Format(format!(
                "dims {dims:?} hold {n} values, data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn i64(dims: Vec<usize>, data: Vec<i64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::I64(data))
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len()],
            data: TensorData::F64(data),
        }
    }

    /// Values as f64 regardless of stored precision.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Ordered named tensors plus JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub entries: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            entries: Vec::new(),
            meta,
        }
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| TensorError::Missing(name.to_string()))
    }

    /// Entry as f64 values with an exact length check.
    pub fn get_f64(&self, name: &str, len: usize) -> Result<Vec<f64>, TensorError> {
        let t = self.get(name)?;
        if t.data.len() != len {
            return Err(TensorError::Shape {
                name: name.to_string(),
                message: format!("expected {len} values, found {}", t.data.len()),
            });
        }
        Ok(t.to_f64())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        w.write_all(MAGIC)?;
        let count = u32::try_from(self.entries.len())
            .map_err(|_| TensorError::Format("too many entries".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| TensorError::Format(format!("name too long: {name}")))?;
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| TensorError::Format(format!("rank too large: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.data.tag(), rank])?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 8);
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                TensorData::I64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            }
            w.write_all(&buf)?;
        }
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let count = u32::from_le_bytes(cur.array()?);
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.array()?) as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| TensorError::Format("name is not UTF-8".into()))?
                .to_string();
            let [tag, rank] = cur.array::<2>()?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let d = u64::from_le_bytes(cur.array()?);
                dims.push(usize::try_from(d).map_err(|_| TensorError::Format("dimension overflow".into()))?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| TensorError::Format("size overflow".into()))?;
            let width = if tag == 0 { 4 } else { 8 };
            let raw = cur.take(n.checked_mul(width).ok_or_else(|| TensorError::Format("size overflow".into()))?)?;
            let data = match tag {
                0 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => TensorData::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
                t => return Err(TensorError::Format(format!("unknown dtype {t} for {name:?}"))),
            };
            entries.push((name, Tensor { dims, data }));
        }
        let mlen = u64::from_le_bytes(cur.array()?);
        let mlen = usize::try_from(mlen).map_err(|_| TensorError::Format("metadata too long".into()))?;
        let meta = serde_json::from_slice(cur.take(mlen)?)?;
        if cur.pos != bytes.len() {
            return Err(TensorError::Format("trailing bytes".into()));
        }
        Ok(Self { entries, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TensorError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new(json!({"format_version": 1, "note": "x"}));
        f.insert("a", Tensor::f64(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.0]).unwrap());
        f.insert("b", Tensor::new(vec![2], TensorData::F32(vec![1.5, f32::MIN_POSITIVE])).unwrap());
        f.insert("c", Tensor::i64(vec![], vec![-7]).unwrap());
        f
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let g = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn layout() {
        let mut f = TensorFile::new(json!(null));
        f.insert("x", Tensor::i64(vec![1], vec![258]).unwrap());
        let b = f.to_bytes().unwrap();
        let mut expected = b"MGT1".to_vec();
        expected.extend([1, 0, 0, 0]);
        expected.extend([1, 0, b'x', 2, 1]);
        expected.extend(1u64.to_le_bytes());
        expected.extend(258i64.to_le_bytes());
        expected.extend(4u64.to_le_bytes());
        expected.extend(b"null");
        assert_eq!(b, expected);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorFile::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(TensorFile::from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_mismatch() {
        assert!(Tensor::f64(vec![2, 2], vec![1.0]).is_err());
        let f = sample();
        assert!(matches!(f.get_f64("a", 5), Err(TensorError::Shape { .. })));
        assert!(matches!(f.get("zz"), Err(TensorError::Missing(_))));
    }
}
