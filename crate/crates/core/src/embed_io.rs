//! EMB1 embedding tables.
//!
//! Wire format, little-endian: magic `EMB1`, u32 entry count, u32 dim, u8
//! pooling tag, then per entry a u16 id byte-length, the UTF-8 id and
//! `dim` × f32.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 13;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated file")]
    TruncatedFile,
    #[error("non-finite value in entry {0:?}")]
    NonFiniteValue(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("vector of width {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("unknown pooling tag {0}")]
    BadPoolingTag(u8),
    #[error("id longer than 65535 bytes")]
    IdTooLong,
    #[error("id is not valid UTF-8")]
    InvalidUtf8,
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for EmbedError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            EmbedError::TruncatedFile
        } else {
            EmbedError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingTag {
    FirstPosition = 0,
    Mean = 1,
    Max = 2,
}

impl PoolingTag {
    pub fn from_byte(b: u8) -> Result<Self, EmbedError> {
        match b {
            0 => Ok(PoolingTag::FirstPosition),
            1 => Ok(PoolingTag::Mean),
            2 => Ok(PoolingTag::Max),
            other => Err(EmbedError::BadPoolingTag(other)),
        }
    }
}

impl fmt::Display for PoolingTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingTag::FirstPosition => "first-position",
            PoolingTag::Mean => "mean",
            PoolingTag::Max => "max",
        })
    }
}

impl FromStr for PoolingTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first-position" | "cls" => Ok(PoolingTag::FirstPosition),
            "mean" => Ok(PoolingTag::Mean),
            "max" => Ok(PoolingTag::Max),
            other => Err(format!("unknown pooling {other:?}")),
        }
    }
}

/// Id-keyed vectors of equal width, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    pooling: PoolingTag,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, pooling: PoolingTag) -> Self {
        EmbeddingTable {
            dim,
            pooling,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pooling(&self) -> PoolingTag {
        self.pooling
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: &str, vector: Vec<f32>) -> Result<(), EmbedError> {
        if vector.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(EmbedError::IdTooLong);
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFiniteValue(id.to_string()));
        }
        if self.index.contains_key(id) {
            return Err(EmbedError::DuplicateId(id.to_string()));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.vectors.push(vector);
        Ok(())
    }

    /// Inserts an `f64` vector, rounding to `f32`.
    pub fn insert_f64(&mut self, id: &str, vector: &[f64]) -> Result<(), EmbedError> {
        self.insert(id, vector.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(|v| v.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// Size of the serialised table in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.ids.iter().map(|id| 2 + id.len() + 4 * self.dim).sum::<usize>()
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.pooling as u8])?;
        for (id, v) in self.entries() {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, EmbedError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header[..4])?;
        if &header[..4] != MAGIC {
            return Err(EmbedError::BadMagic);
        }
        r.read_exact(&mut header[4..])?;
        let count = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let pooling = PoolingTag::from_byte(header[12])?;
        let mut table = EmbeddingTable::new(dim, pooling);
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| EmbedError::InvalidUtf8)?;
            r.read_exact(&mut buf)?;
            let v = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.insert(&id, v)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(EmbedError::TrailingBytes(rest.len()));
        }
        Ok(table)
    }

    /// Tab-separated debugging dump: id then components.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# dim={} pooling={}", self.dim, self.pooling)?;
        for (id, v) in self.entries() {
            let cols: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{id}\t{}", cols.join("\t"))?;
        }
        Ok(())
    }
}

/// Cosine similarity, accumulated in `f64`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let t = EmbeddingTable::new(7, PoolingTag::Max);
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(buf.len(), HEADER_LEN);
        assert_eq!(EmbeddingTable::read(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn size_arithmetic() {
        let mut t = EmbeddingTable::new(4, PoolingTag::Mean);
        for id in ["a", "bb", "D000001"] {
            t.insert(id, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        }
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(buf.len(), 13 + (2 + 1 + 16) + (2 + 2 + 16) + (2 + 7 + 16));
        assert_eq!(buf.len(), t.encoded_len());
    }

    #[test]
    fn rejects_invalid_input() {
        let mut t = EmbeddingTable::new(2, PoolingTag::Mean);
        t.insert("x", vec![1.0, 0.0]).unwrap();
        assert!(matches!(t.insert("x", vec![0.0, 1.0]), Err(EmbedError::DuplicateId(_))));
        assert!(matches!(t.insert("y", vec![f32::NAN, 1.0]), Err(EmbedError::NonFiniteValue(_))));
        assert!(matches!(t.insert("z", vec![1.0]), Err(EmbedError::DimensionMismatch { .. })));

        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert!(matches!(EmbeddingTable::read(&buf[..buf.len() - 1]), Err(EmbedError::TruncatedFile)));
        let mut bad = buf.clone();
        bad[12] = 9;
        assert!(matches!(EmbeddingTable::read(bad.as_slice()), Err(EmbedError::BadPoolingTag(9))));
        bad = buf.clone();
        bad[0] = b'F';
        assert!(matches!(EmbeddingTable::read(bad.as_slice()), Err(EmbedError::BadMagic)));
        bad = buf.clone();
        bad.extend_from_slice(&[0, 0]);
        assert!(matches!(EmbeddingTable::read(bad.as_slice()), Err(EmbedError::TrailingBytes(2))));
        let nan = f32::NAN.to_le_bytes();
        bad = buf.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&nan);
        assert!(matches!(EmbeddingTable::read(bad.as_slice()), Err(EmbedError::NonFiniteValue(_))));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbedError::ZeroVector)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(EmbedError::DimensionMismatch { .. })));
    }
}
