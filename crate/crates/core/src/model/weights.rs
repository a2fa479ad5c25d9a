//! AWM1 weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AWM1"            4-byte magic
//! u32               tensor count
//! per tensor:
//!   u16             name length in bytes
//!   [u8]            UTF-8 name
//!   u8              dtype tag (0 = f32 little-endian)
//!   u8              rank
//!   u32 * rank      dims
//!   [f32]           row-major data
//! u32               CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"AWM1\"")]
    BadMagic,
    #[error("checksum mismatch (truncated or corrupt file)")]
    Checksum,
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    WrongShape { name: String, expected: Vec<usize>, got: Vec<usize> },
}

pub const MAGIC: &[u8; 4] = b"AWM1";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }
}

/// Named tensors, kept in name order so that files are byte-stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    pub tensors: BTreeMap<String, Tensor>,
}

/// Expected tensor names and shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest(pub Vec<(String, Vec<usize>)>);

impl Manifest {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(n, _)| n.as_str())
    }
}

impl ModelWeights {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, WeightsError> {
        self.tensors.get(name).ok_or_else(|| WeightsError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let magic_len = bytes.len().min(4);
        if bytes[..magic_len] != MAGIC[..magic_len] {
            return Err(WeightsError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(WeightsError::Checksum);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(WeightsError::Checksum);
        }
        let mut r = Reader { buf: body, at: 4 };
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WeightsError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(WeightsError::UnsupportedDtype(dtype));
            }
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(WeightsError::Malformed(format!("duplicate tensor {name:?}")));
            }
        }
        if r.at != body.len() {
            return Err(WeightsError::Malformed("trailing bytes after last tensor".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), WeightsError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads a file without checking it against any manifest.
    pub fn load_unchecked(path: &Path) -> Result<Self, WeightsError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Every manifest tensor must exist with its exact shape, and nothing
    /// else may be present.
    pub fn validate(&self, manifest: &Manifest) -> Result<(), WeightsError> {
        for (name, shape) in &manifest.0 {
            let t = self.get(name)?;
            if &t.shape != shape {
                return Err(WeightsError::WrongShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape.clone(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !manifest.0.iter().any(|(n, _)| n == *k)) {
            return Err(WeightsError::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }
}

/// Loads a weight file and checks it against `manifest`.
pub fn load_weights(path: &Path, manifest: &Manifest) -> Result<ModelWeights, WeightsError> {
    let weights = ModelWeights::load_unchecked(path)?;
    weights.validate(manifest)?;
    Ok(weights)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| WeightsError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelWeights {
        let mut w = ModelWeights::default();
        w.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]));
        w.insert("a.bias", Tensor::new(vec![2], vec![0.25, -0.5]));
        w
    }

    fn manifest() -> Manifest {
        Manifest(vec![("a.weight".into(), vec![2, 3]), ("a.bias".into(), vec![2])])
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = sample();
        let bytes = w.to_bytes();
        let back = ModelWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        back.validate(&manifest()).unwrap();
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"AWM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        // first tensor in name order is "a.bias"
        assert_eq!(u16::from_le_bytes(bytes[8..10].try_into().unwrap()), 6);
        assert_eq!(&bytes[10..16], b"a.bias");
        assert_eq!(bytes[16], 0);
        assert_eq!(bytes[17], 1);
    }

    #[test]
    fn truncation_is_checksum_error() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 5, 20, 9, 5] {
            assert!(
                matches!(ModelWeights::from_bytes(&bytes[..cut]), Err(WeightsError::Checksum)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn bit_flip_is_checksum_error() {
        let mut bytes = sample().to_bytes();
        bytes[30] ^= 0x10;
        assert!(matches!(ModelWeights::from_bytes(&bytes), Err(WeightsError::Checksum)));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(ModelWeights::from_bytes(&bytes), Err(WeightsError::BadMagic)));
    }

    #[test]
    fn manifest_mismatches() {
        let mut w = sample();
        let t = w.tensors.remove("a.bias").unwrap();
        w.insert("a.bias_renamed", t);
        assert!(matches!(w.validate(&manifest()), Err(WeightsError::MissingTensor(n)) if n == "a.bias"));

        let mut w = sample();
        w.insert("a.bias", Tensor::zeros(vec![3]));
        assert!(matches!(w.validate(&manifest()), Err(WeightsError::WrongShape { .. })));

        let mut w = sample();
        w.insert("extra", Tensor::zeros(vec![1]));
        assert!(matches!(w.validate(&manifest()), Err(WeightsError::UnexpectedTensor(_))));
    }
}
