//! Named-tensor checkpoint container with a fixed binary layout:
//! magic "FLCK", version u32 LE, tensor count u32 LE; per tensor:
//! name length u32, UTF-8 name, dtype u8 (0 = f32, 1 = f64), ndim u32,
//! dims u32 each, then raw little-endian element bytes.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FLCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint<F> {
    tensors: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new() -> Self {
        Checkpoint { tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push((name, tensor));
        Ok(())
    }

    /// Insert, replacing any existing tensor of the same name.
    pub fn upsert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.tensors.len());
                self.tensors.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Store a UTF-8 string as a byte-valued tensor (exact in either dtype).
    pub fn set_text(&mut self, name: &str, text: &str) {
        let data: Vec<F> = text.bytes().map(|b| F::from_f64(b as f64)).collect();
        let n = data.len();
        self.upsert(name, Tensor::from_vec(&[n], data));
    }

    pub fn get_text(&self, name: &str) -> Result<String> {
        let t = self.require(name)?;
        let bytes: Vec<u8> = t.data().iter().map(|v| v.as_f64() as u8).collect();
        String::from_utf8(bytes).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) {
        self.upsert(name, Tensor::scalar(F::from_f64(v)));
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        Ok(self.require(name)?.data()[0].as_f64())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(F::DTYPE as u8);
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?
                .to_string();
            let dtype = Dtype::from_u8(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype for {name}")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let width = dtype.byte_width();
            let raw = r.take(n * width)?;
            let data: Vec<F> = match dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| F::from_f64(f32::read_le(c) as f64))
                    .collect(),
                Dtype::F64 => raw.chunks_exact(8).map(|c| F::from_f64(f64::read_le(c))).collect(),
            };
            ckpt.insert(name, Tensor::from_vec(&shape, data))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
