//! Binary checkpoint container.
//!
//! Layout: magic, version (u32), kind (u8), scalar width (u8), hyper JSON,
//! vocabulary hashes, named tensors, then a SHA-256 of everything before it.
//! All integers are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

use super::params::{Params, Tensor};
use super::NnetError;

pub const MAGIC: &[u8; 5] = b"LRNMT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Translator = 0,
    Reranker = 1,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub kind: CheckpointKind,
    pub hyper_json: String,
    pub vocab_hashes: Vec<[u8; 32]>,
    pub params: Params<T>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    buf.push(ck.kind as u8);
    buf.push(T::BYTES as u8);
    put_u32(&mut buf, ck.hyper_json.len() as u32);
    buf.extend_from_slice(ck.hyper_json.as_bytes());
    put_u32(&mut buf, ck.vocab_hashes.len() as u32);
    for h in &ck.vocab_hashes {
        buf.extend_from_slice(h);
    }
    put_u32(&mut buf, ck.params.len() as u32);
    for (name, t) in ck.params.iter() {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape.len() as u32);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut buf);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnetError> {
        if self.buf.len() - self.pos < n {
            return Err(NnetError::CorruptCheckpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnetError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, NnetError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String, NnetError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnetError::CorruptCheckpoint("invalid utf-8".into()))
    }
}

fn read_values<S: Scalar, T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks(S::BYTES)
        .map(|c| T::of(S::read_le(c).f64()))
        .collect()
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, NnetError> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NnetError::CorruptCheckpoint("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(NnetError::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnetError::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let kind = match r.u8()? {
        0 => CheckpointKind::Translator,
        1 => CheckpointKind::Reranker,
        k => return Err(NnetError::CorruptCheckpoint(format!("unknown kind {k}"))),
    };
    let width = r.u8()? as usize;
    if width != 4 && width != 8 {
        return Err(NnetError::CorruptCheckpoint(format!(
            "unknown scalar width {width}"
        )));
    }
    let hyper_json = r.string()?;
    let n_hash = r.u32()? as usize;
    let mut vocab_hashes = Vec::with_capacity(n_hash.min(16));
    for _ in 0..n_hash {
        vocab_hashes.push(r.take(32)?.try_into().expect("32 bytes"));
    }
    let n_params = r.u32()? as usize;
    let mut params = Params::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(width))
            .ok_or_else(|| NnetError::CorruptCheckpoint("tensor size overflow".into()))?;
        let raw = r.take(count)?;
        let data = if width == 4 {
            read_values::<f32, T>(raw)
        } else {
            read_values::<f64, T>(raw)
        };
        if params.by_name(&name).is_some() {
            return Err(NnetError::CorruptCheckpoint(format!(
                "duplicate tensor {name}"
            )));
        }
        params.add(name, Tensor::from_vec(&shape, data));
    }
    if r.pos != body.len() {
        return Err(NnetError::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        kind,
        hyper_json,
        vocab_hashes,
        params,
    })
}

pub fn save<T: Scalar>(ck: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<(), NnetError> {
    std::fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, NnetError> {
    decode(&std::fs::read(path)?)
}
