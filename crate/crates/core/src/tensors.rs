//! Named parameter tensors and the binary blob format used in checkpoints.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! magic  b"HDTB"   version u32 = 1   count u32
//! per tensor:
//!   name_len u32, name (utf-8)
//!   dtype u8 (0 = f64)
//!   ndim u32, dims u64 * ndim
//!   data f64 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HDTB";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// A set of named tensors that can be enumerated in a fixed order.
pub trait ParamGroup {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::default();
        for t in self.tensors() {
            store.insert(t.name, t.shape, t.data.to_vec());
        }
        store
    }

    /// Copies every tensor from `store`, checking names and shapes.
    fn load_store(&mut self, store: &TensorStore) -> Result<()> {
        for t in self.tensors_mut() {
            let (shape, data) = store
                .get(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", t.name)))?;
            if *shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    t.name, shape, t.shape
                )));
            }
            t.data.copy_from_slice(data);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            h.update(t.name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn sum_squares(group: &impl ParamGroup) -> f64 {
    group
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl TensorStore {
    pub fn insert(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        self.entries.insert(name, (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<&(Vec<usize>, Vec<f64>)> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("tensor blob: {m}"));
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut bytes).ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = read_u32(&mut bytes).ok_or_else(|| bad("truncated header"))?;
        let mut store = TensorStore::default();
        for _ in 0..count {
            let name_len = read_u32(&mut bytes).ok_or_else(|| bad("truncated entry"))? as usize;
            if bytes.len() < name_len {
                return Err(bad("truncated name"));
            }
            let name = String::from_utf8(bytes[..name_len].to_vec()).map_err(|_| bad("name not utf-8"))?;
            bytes = &bytes[name_len..];
            let mut dtype = [0u8; 1];
            bytes.read_exact(&mut dtype).map_err(|_| bad("truncated dtype"))?;
            if dtype[0] != DTYPE_F64 {
                return Err(bad(&format!("unsupported dtype {}", dtype[0])));
            }
            let ndim = read_u32(&mut bytes).ok_or_else(|| bad("truncated shape"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                bytes.read_exact(&mut b).map_err(|_| bad("truncated shape"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            if bytes.len() < n * 8 {
                return Err(bad(&format!("truncated data for `{name}`")));
            }
            let data = bytes[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            bytes = &bytes[n * 8..];
            store.insert(name, shape, data);
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(bytes: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    bytes.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn blob_roundtrip(
            entries in proptest::collection::btree_map(
                "[a-z.]{1,12}",
                (proptest::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..5,
            )
        ) {
            let mut store = TensorStore::default();
            for (name, (shape, seed)) in entries {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| f64::from_bits(seed.wrapping_add(i as u64 * 0x9E37)) ).map(|v| if v.is_nan() { 0.5 } else { v }).collect();
                store.insert(name, shape, data);
            }
            let back = TensorStore::from_bytes(&store.to_bytes()).unwrap();
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut store = TensorStore::default();
        store.insert("w".into(), vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = store.to_bytes();
        assert!(TensorStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(TensorStore::from_bytes(b"nope").is_err());
    }
}
