//! Checkpoint format: magic "RFCK", format version, a count-prefixed table
//! of named float32 tensors (name length, name bytes, ndim, dims,
//! little-endian data), and a trailing CRC32 over everything before it.
//! Values are stored as f32 regardless of compute precision.

use std::io::{Read, Write};
use std::path::Path;

use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic at offset 0: expected RFCK")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated at offset {0}")]
    Truncated(usize),
    #[error("crc mismatch at offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { offset: usize, stored: u32, computed: u32 },
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serialize every parameter, in registration order, by canonical name.
pub fn write_store<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.data.iter() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.buf.len() {
            return Err(CheckpointError::Truncated(self.at));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load a checkpoint into an existing store. Every stored tensor must match
/// a registered parameter by name and shape, and every parameter must be
/// covered exactly once.
pub fn read_into_store<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let crc_offset = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[crc_offset..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..crc_offset]);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { offset: crc_offset, stored, computed });
    }
    let mut c = Cursor { buf: &bytes[..crc_offset], at: 0 };
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = c.u32()? as usize;
    if count != store.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "checkpoint has {count} tensors, model has {}",
            store.len()
        )));
    }
    let mut loaded = vec![false; store.len()];
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4)?;
        let id = store
            .id_of(&name)
            .ok_or_else(|| CheckpointError::ParamMismatch(format!("unknown tensor {name}")))?;
        if store.get(id).shape != shape {
            return Err(CheckpointError::ParamMismatch(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                shape,
                store.get(id).shape
            )));
        }
        if loaded[id.0] {
            return Err(CheckpointError::ParamMismatch(format!("tensor {name} appears twice")));
        }
        loaded[id.0] = true;
        let data: Vec<S> = raw
            .chunks_exact(4)
            .map(|b| S::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        store.set_values(id, data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn sample_store() -> ParamStore<f32> {
        let mut rng = CounterRng::new(3);
        let mut s: ParamStore<f32> = ParamStore::new();
        s.uniform("a.w", &[3, 4], 3, &mut rng);
        s.uniform("b.w", &[2], 2, &mut rng);
        s
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfck");
        let store = sample_store();
        write_store(&store, &path).unwrap();
        let mut other = sample_store();
        other.zero_prefix("");
        read_into_store(&mut other, &path).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_byte_fails_crc_naming_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfck");
        write_store(&sample_store(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_into_store(&mut sample_store(), &path).unwrap_err();
        match err {
            CheckpointError::CrcMismatch { offset, .. } => assert_eq!(offset, bytes.len() - 4),
            other => panic!("expected crc error, got {other}"),
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfck");
        write_store(&sample_store(), &path).unwrap();
        let mut rng = CounterRng::new(3);
        let mut other: ParamStore<f32> = ParamStore::new();
        other.uniform("a.w", &[4, 3], 3, &mut rng);
        other.uniform("b.w", &[2], 2, &mut rng);
        assert!(matches!(
            read_into_store(&mut other, &path).unwrap_err(),
            CheckpointError::ParamMismatch(_)
        ));
    }

    #[test]
    fn same_store_writes_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rfck");
        let p2 = dir.path().join("b.rfck");
        write_store(&sample_store(), &p1).unwrap();
        write_store(&sample_store(), &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
