//! Named parameter storage and its binary container.
//!
//! Container layout, all integers and floats little-endian:
//!
//! ```text
//! b"SPKP"                 magic
//! u32                     format version (1)
//! u32                     entry count
//! per entry:
//!   u32                   name length in bytes
//!   [u8]                  UTF-8 name
//!   u8                    flags (bit 0: trainable)
//!   u32                   rank
//!   u64 * rank            dims
//!   f64 * prod(dims)      values, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::Scalar;

use super::{Graph, Tensor, Var};

pub const PARAMS_MAGIC: &[u8; 4] = b"SPKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers such as running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Ordered, name-unique parameter collection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalar values.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Mutable values of the trainable parameters, in store order.
    pub fn trainable_values_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| &mut p.value)
            .collect()
    }

    /// Places every parameter on `g`; trainable ones receive gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Like [`bind`](Self::bind) but takes trainable nodes from `trainable`, in store order.
    pub fn bind_with(&self, g: &mut Graph<T>, trainable: &[Var]) -> Result<Vec<Var>> {
        let mut it = trainable.iter();
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    it.next().copied().ok_or_else(|| Error::Config("too few trainable vars".into()))
                } else {
                    Ok(g.constant(p.value.clone()))
                }
            })
            .collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().find(|p| !p.value.is_finite()) {
            Some(p) => Err(Error::NonFinite(format!("parameter {}", p.name))),
            None => Ok(()),
        }
    }

    /// Keeps only entries whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            params: self.params.iter().filter(|p| keep(&p.name)).cloned().collect(),
        }
    }

    /// Copies values from `other` by name; names and shapes must match exactly.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Config(format!("parameter {:?} missing from source", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "assign parameters",
                    detail: format!(
                        "{}: {:?} vs {:?}",
                        p.name,
                        p.value.shape(),
                        src.value.shape()
                    ),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != PARAMS_MAGIC {
            return Err(Error::Parse("not a parameter container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?
                .to_string();
            let trainable = r.take(1)?[0] & 1 == 1;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.u64().map(|b| T::of(f64::from_bits(b))))
                .collect::<Result<Vec<_>>>()?;
            store.add(name, Tensor::new(shape, data)?, trainable)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after parameter container".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse("truncated parameter container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_byte_exact() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true)
            .unwrap();
        let b = s.to_bytes();
        let mut expected = b"SPKP".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.0f64).to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn duplicate_names_and_truncation() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::scalar(1.0), true).unwrap();
        assert!(s.add("a", Tensor::scalar(2.0), false).is_err());
        let mut b = s.to_bytes();
        b.pop();
        assert!(ParamStore::<f64>::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), flag in any::<bool>()) {
            let mut s = ParamStore::new();
            s.add("x.weight", Tensor::from_vec(vals.clone()), flag).unwrap();
            s.add("buf", Tensor::new(vec![1, vals.len()], vals).unwrap(), false).unwrap();
            let back = ParamStore::<f64>::from_bytes(&s.to_bytes()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
