//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "NMASKCKP"
//! version      u32      1
//! payload_len  u64
//! payload:
//!   spec_len   u32, then spec_len bytes of JSON (ArchitectureSpec)
//!   count      u32
//!   count x { name_len u32, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!             ndim u8, ndim x u64 extents, raw little-endian elements }
//! crc32        u32      CRC-32 (IEEE) of the payload bytes
//! ```

use std::path::Path;

use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, Network};
use crate::volgrad::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"NMASKCKP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

pub fn encode<T: Scalar>(spec: &ArchitectureSpec, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let spec_json = serde_json::to_vec(spec)?;
    payload.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&spec_json);
    payload.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.push(T::DTYPE.code());
        payload.push(t.shape().len() as u8);
        for &e in t.shape() {
            payload.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CheckpointFormat(format!("record overruns payload at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ArchitectureSpec, NamedTensors<T>)> {
    if bytes.len() < 8 {
        return Err(Error::CheckpointTruncated { expected: HEADER_LEN + 4, found: bytes.len() });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::CheckpointTruncated { expected: HEADER_LEN + 4, found: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = usize::try_from(payload_len)
        .ok()
        .and_then(|p| p.checked_add(HEADER_LEN + 4))
        .ok_or(Error::CheckpointTruncated { expected: usize::MAX, found: bytes.len() })?;
    if bytes.len() < expected {
        return Err(Error::CheckpointTruncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let payload = &bytes[HEADER_LEN..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::CheckpointChecksum { stored, computed });
    }

    let mut c = Cursor { buf: payload, pos: 0 };
    let spec_len = c.u32()? as usize;
    let spec: ArchitectureSpec = serde_json::from_slice(c.take(spec_len)?)?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
        let dtype = DType::from_code(c.u8()?)
            .ok_or_else(|| Error::CheckpointFormat(format!("{name}: unknown dtype")))?;
        if dtype != T::DTYPE {
            return Err(Error::CheckpointFormat(format!("{name}: stored as {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product::<usize>();
        let raw = c.take(numel * dtype.size())?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != payload.len() {
        return Err(Error::CheckpointFormat("unread bytes after last tensor".into()));
    }
    Ok((spec, tensors))
}

pub fn save_network<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(net.spec(), &net.named_tensors())?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_network<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (spec, tensors) = decode(&bytes)?;
    Network::from_named_tensors(spec, tensors)
}
