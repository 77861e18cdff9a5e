//! Named weight tensors and the binary weight file.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "HSWT" | version u32 | count u32 |
//!   count x { name_len u16 | name bytes | rank u32 | dims u32[rank] | f32[prod(dims)] }
//! ```
//!
//! Records are written in name order so identical stores give identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

const MAGIC: &[u8; 4] = b"HSWT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error("weight {name}: {len} values do not fill dims {dims:?}")]
    Dims {
        name: String,
        dims: Vec<usize>,
        len: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        WeightTensor { dims, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Weights keyed by stable string names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, WeightTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: WeightTensor,
    ) -> Result<(), WeightError> {
        let name = name.into();
        let expected: usize = tensor.dims.iter().product();
        if expected != tensor.data.len() {
            return Err(WeightError::Dims {
                name,
                dims: tensor.dims,
                len: tensor.data.len(),
            });
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    /// Mutable values of a stored tensor; its dims stay fixed.
    pub fn values_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.tensors.get_mut(name).map(|t| t.data.as_mut_slice())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(WeightTensor::len).sum()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), WeightError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&to_u32(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| WeightError::Format(format!("name too long: {name}")))?;
            buf.extend_from_slice(&name_len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&to_u32(t.dims.len())?.to_le_bytes());
            for &d in &t.dims {
                buf.extend_from_slice(&to_u32(d)?.to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, WeightError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(4)? != MAGIC {
            return Err(WeightError::Format("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(WeightError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let count = cur.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| WeightError::Format("name is not utf-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| WeightError::Format(format!("dims of {name} overflow")))?;
            let payload = cur.take(
                len.checked_mul(4)
                    .ok_or_else(|| WeightError::Format("payload overflow".into()))?,
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store.insert(name, WeightTensor::new(dims, data))?;
        }
        if cur.pos != bytes.len() {
            return Err(WeightError::Format("trailing bytes".into()));
        }
        Ok(store)
    }
}

fn to_u32(v: usize) -> Result<u32, WeightError> {
    u32::try_from(v).map_err(|_| WeightError::Format(format!("{v} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| WeightError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
