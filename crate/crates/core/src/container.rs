//! Versioned tensor container shared by model and probe checkpoints.
//!
//! Layout, all little-endian: magic `MZCK`, u32 version, u32 config length and
//! the config JSON, u32 tensor count, then per tensor a u16 name length, the
//! UTF-8 name, u8 rank, u32 per dimension and the row-major `f32` data. The
//! trailer holds the RNG state (u64 seed, u64 stream, u128 word position) and
//! the u64 training-step counter.

use std::io::{self, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Mat, Params};

pub const MAGIC: &[u8; 4] = b"MZCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container")]
    Truncated,
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for ContainerError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ContainerError::Truncated
        } else {
            ContainerError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    /// Captures a generator seeded from a `u64`.
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config_json: String,
    pub tensors: Vec<Tensor>,
    pub rng: RngState,
    pub step: u64,
}

impl Container {
    /// Snapshot of every parameter, in store order.
    pub fn from_params(config_json: String, params: &Params, rng: RngState, step: u64) -> Self {
        let tensors = params
            .ids()
            .map(|id| {
                let m = params.get(id);
                Tensor {
                    name: params.name(id).to_string(),
                    shape: vec![m.nrows(), m.ncols()],
                    data: m.iter().map(|&v| v as f32).collect(),
                }
            })
            .collect();
        Container {
            config_json,
            tensors,
            rng,
            step,
        }
    }

    /// Overwrites `params` with the stored tensors, matching by name and shape.
    pub fn load_into(&self, params: &mut Params) -> Result<(), ContainerError> {
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| ContainerError::MissingTensor(name.clone()))?;
            let target = params.get_mut(id);
            let expected = vec![target.nrows(), target.ncols()];
            if t.shape != expected {
                return Err(ContainerError::ShapeMismatch {
                    name,
                    expected,
                    found: t.shape.clone(),
                });
            }
            *target = Mat::from_shape_vec((expected[0], expected[1]), t.data.iter().map(|&v| f64::from(v)).collect())
                .expect("shape checked");
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config_json.len() as u32).to_le_bytes())?;
        w.write_all(self.config_json.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u16).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&self.rng.seed.to_le_bytes())?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let config_len = read_u32(&mut r)? as usize;
        let config_json = read_string(&mut r, config_len)?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let name = read_string(&mut r, u16::from_le_bytes(len) as usize)?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        let seed = read_u64(&mut r)?;
        let stream = read_u64(&mut r)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        let step = read_u64(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ContainerError::Malformed(format!("{} trailing bytes", rest.len())));
        }
        Ok(Container {
            config_json,
            tensors,
            rng: RngState {
                seed,
                stream,
                word_pos: u128::from_le_bytes(wp),
            },
            step,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ContainerError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String, ContainerError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| ContainerError::Malformed("non-UTF-8 string".into()))
}

/// Rounds every parameter through `f32`, so in-memory values match a
/// save/load cycle.
pub fn round_to_f32(params: &mut Params) {
    for id in params.ids().collect::<Vec<_>>() {
        params.get_mut(id).mapv_inplace(|v| f64::from(v as f32));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Group;
    use ndarray::array;
    use rand::RngCore;

    #[test]
    fn round_trip_with_rng_state() {
        let mut p = Params::default();
        p.add("w", Group::Main, array![[1.5, -2.25], [0.125, 3.0]]);
        p.add("b", Group::Decoder, array![[0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let c = Container::from_params("{\"a\":1}".into(), &p, RngState::capture(9, &rng), 42);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = Container::read(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let mut restored = back.rng.restore();
        assert_eq!(restored.next_u64(), rng.next_u64());

        let mut q = p.clone();
        q.get_mut(q.id("w").unwrap()).fill(0.0);
        back.load_into(&mut q).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn rejects_corruption() {
        let mut p = Params::default();
        p.add("w", Group::Main, array![[1.0]]);
        let mut buf = Vec::new();
        Container::from_params("{}".into(), &p, RngState::default(), 0).write(&mut buf).unwrap();
        assert!(matches!(Container::read(&buf[..buf.len() - 1]), Err(ContainerError::Truncated)));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Container::read(bad.as_slice()), Err(ContainerError::BadMagic)));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(Container::read(long.as_slice()), Err(ContainerError::Malformed(_))));
    }
}
