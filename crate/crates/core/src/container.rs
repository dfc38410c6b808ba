//! Binary tensor container shared by encoder checkpoints and retrieval indexes.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                         |
//! |--------|------|-------------------------------------------------|
//! | 0      | 8    | magic `DKTENSOR`                                |
//! | 8      | 4    | format version, `u32` (currently 1)             |
//! | 12     | 8    | header length `H` in bytes, `u64`               |
//! | 20     | H    | UTF-8 JSON header                               |
//! | 20 + H | ...  | tensor payload, IEEE-754 `f64` little-endian    |
//!
//! The header is `{"format_version", "kind", "meta", "tensors"}` where
//! `tensors` is the shape table: `{"name", "rows", "cols", "offset"}` with
//! `offset` counted in bytes from the start of the payload. Tensors are
//! stored row-major in table order with no padding between them.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DKTENSOR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("expected a `{expected}` container, found `{found}`")]
    Kind { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ContainerError> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(offset as usize);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version(version));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| ContainerError::Header(e.to_string()))?;
        if header.format_version != version {
            return Err(ContainerError::Header("version mismatch between prefix and header".into()));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start + 8 * e.rows * e.cols;
            let bytes = payload.get(start..end).ok_or_else(|| {
                ContainerError::Header(format!("tensor `{}` extends past the payload", e.name))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name, Tensor::from_vec(e.rows, e.cols, data)));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ContainerError::Kind {
                expected: kind.into(),
                found: self.kind.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_stable() {
        let c = Container {
            kind: "test".into(),
            meta: serde_json::json!({"a": 1}),
            tensors: vec![("x".into(), Tensor::from_vec(1, 2, vec![1.0, -2.5]))],
        };
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DKTENSOR");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        let h = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        assert_eq!(buf.len(), 20 + h + 16);
        assert_eq!(f64::from_le_bytes(buf[20 + h + 8..].try_into().unwrap()), -2.5);
        assert_eq!(Container::read_from(&buf[..]).unwrap(), c);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Container::read_from(&b"NOTATENSORFILE.........."[..]),
            Err(ContainerError::BadMagic)
        ));
    }
}
