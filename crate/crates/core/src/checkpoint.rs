//! The `RXF1` binary container used for model weights and image tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes  "RXF1"
//! version          u32      (currently 1; unknown versions rejected)
//! endianness       u8       (0 = little)
//! tensor count     u32
//! per tensor:      name_len u32, name utf-8, dtype u8 (0=f32, 1=f64),
//!                  rank u32, dims u64 x rank, payload offset u64
//! payload_len      u64
//! payload          raw tensor values, in table order
//! metadata         JSON document to end of file
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Parameter;
use crate::Tensor;

const MAGIC: &[u8; 4] = b"RXF1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    /// Values widened to f64 regardless of stored dtype.
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        TensorEntry {
            dims,
            dtype: Dtype::F64,
            data,
        }
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f64>) -> Self {
        TensorEntry {
            dims,
            dtype: Dtype::F32,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.dims.clone(), self.data.clone())
    }
}

/// In-memory checkpoint: named tensors plus a free-form JSON metadata block.
/// Tensor order is name-sorted, so identical contents produce identical bytes.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) {
        self.tensors.insert(name.into(), entry);
    }

    pub fn insert_params(&mut self, prefix: &str, params: &[Parameter]) {
        for p in params {
            let name = if prefix.is_empty() {
                p.name.clone()
            } else {
                format!("{prefix}/{}", p.name)
            };
            self.insert(name, TensorEntry::f64(p.tensor.shape(), p.tensor.data()));
        }
    }

    pub fn get(&self, name: &str, path: &Path) -> Result<&TensorEntry> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("missing tensor `{name}`"),
        })
    }

    /// Copies stored values into matching parameters, by name, with shape
    /// checks. Every parameter must be present.
    pub fn load_params(&self, prefix: &str, params: &[Parameter], path: &Path) -> Result<()> {
        for p in params {
            let name = if prefix.is_empty() {
                p.name.clone()
            } else {
                format!("{prefix}/{}", p.name)
            };
            let entry = self.get(&name, path)?;
            if entry.dims != p.tensor.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        entry.dims,
                        p.tensor.shape()
                    ),
                });
            }
            p.tensor.with_data_mut(|d| d.copy_from_slice(&entry.data));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(0u8); // little-endian
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, entry) in &self.tensors {
            let expect: usize = entry.dims.iter().product();
            assert_eq!(expect, entry.data.len(), "tensor `{name}` dims/data mismatch");
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(match entry.dtype {
                Dtype::F32 => 0,
                Dtype::F64 => 1,
            });
            buf.extend_from_slice(&(entry.dims.len() as u32).to_le_bytes());
            for &d in &entry.dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            let elem = match entry.dtype {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
            };
            offset += (entry.data.len() * elem) as u64;
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        for entry in self.tensors.values() {
            match entry.dtype {
                Dtype::F32 => {
                    for &v in &entry.data {
                        buf.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for &v in &entry.data {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        buf.extend_from_slice(&meta);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let fail = |detail: String| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        fn take_slice<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Option<&'a [u8]> {
            if *pos + n > bytes.len() {
                return None;
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Some(s)
        }
        let mut pos = 0usize;
        macro_rules! take {
            ($pos:expr, $n:expr) => {
                take_slice(&bytes, $pos, $n)
                    .ok_or_else(|| fail(format!("truncated at byte {}", *$pos)))?
            };
        }
        if take!(&mut pos, 4) != MAGIC {
            return Err(fail("bad magic, not an RXF1 container".into()));
        }
        let version = u32::from_le_bytes(take!(&mut pos, 4).try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("unsupported format version {version}")));
        }
        let endian = take!(&mut pos, 1)[0];
        if endian != 0 {
            return Err(fail(format!("unsupported endianness flag {endian}")));
        }
        let count = u32::from_le_bytes(take!(&mut pos, 4).try_into().unwrap()) as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take!(&mut pos, 4).try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take!(&mut pos, name_len))
                .map_err(|_| fail("tensor name is not valid utf-8".into()))?
                .to_string();
            let dtype = match take!(&mut pos, 1)[0] {
                0 => Dtype::F32,
                1 => Dtype::F64,
                d => return Err(fail(format!("unknown dtype code {d} for `{name}`"))),
            };
            let rank = u32::from_le_bytes(take!(&mut pos, 4).try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take!(&mut pos, 8).try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(take!(&mut pos, 8).try_into().unwrap()) as usize;
            table.push((name, dtype, dims, offset));
        }
        let payload_len = u64::from_le_bytes(take!(&mut pos, 8).try_into().unwrap()) as usize;
        let payload = take!(&mut pos, payload_len);
        let payload = payload.to_vec();
        let metadata: serde_json::Value = if pos < bytes.len() {
            serde_json::from_slice(&bytes[pos..])
                .map_err(|e| fail(format!("bad metadata trailer: {e}")))?
        } else {
            serde_json::Value::Null
        };
        let mut tensors = BTreeMap::new();
        for (name, dtype, dims, offset) in table {
            let n: usize = dims.iter().product();
            let elem = match dtype {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
            };
            if offset + n * elem > payload.len() {
                return Err(fail(format!("tensor `{name}` payload out of bounds")));
            }
            let raw = &payload[offset..offset + n * elem];
            let data: Vec<f64> = match dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.insert(name, TensorEntry { dims, dtype, data });
        }
        Ok(Checkpoint { tensors, metadata })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rxf");
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ck = Checkpoint::new(serde_json::json!({"seed": 42, "note": "test"}));
        let t = Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        ck.insert("a/weight", TensorEntry::f64(t.shape(), t.data()));
        ck.insert("b/bias", TensorEntry::f64(vec![2], vec![0.25, -0.75]));
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.tensors.len(), 2);
        for (name, entry) in &ck.tensors {
            let got = &loaded.tensors[name];
            assert_eq!(got.dims, entry.dims);
            // bit-exact: compare the actual bit patterns
            let a: Vec<u64> = entry.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = got.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(loaded.metadata["seed"], 42);
    }

    #[test]
    fn identical_contents_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.rxf"), dir.path().join("b.rxf"));
        let mut ck = Checkpoint::new(serde_json::json!({"v": 1}));
        ck.insert("x", TensorEntry::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_future_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rxf");
        let ck = Checkpoint::new(serde_json::Value::Null);
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // bump version field
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.rxf");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
