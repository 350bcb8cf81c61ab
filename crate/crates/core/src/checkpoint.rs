//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "DRCK"
//! version    u32      (currently 1)
//! n_header   u32
//!   name_len u32, name utf-8, value f64          (scalar hyperparameters)
//! n_records  u32
//!   name_len u32, name utf-8, shape 4 x u32, values f64 x prod(shape)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"DRCK";
pub const VERSION: u32 = 1;

/// In-memory checkpoint: named scalars plus named tensors, order preserved.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, f64)>,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Self {
        Checkpoint {
            header: Vec::new(),
            records: params
                .into_iter()
                .map(|p| {
                    let mut t = p.tensor.clone();
                    t.grad = None;
                    (p.name.clone(), t)
                })
                .collect(),
        }
    }

    pub fn header_value(&self, name: &str) -> Option<f64> {
        self.header.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn record(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for (name, value) in &self.header {
            write_name(&mut out, name);
            out.extend_from_slice(&value.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            write_name(&mut out, name);
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let value = r.f64()?;
            ck.header.push((name, value));
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])
                .map_err(|e| Error::Checkpoint(format!("record {name}: {e}")))?;
            let values = (0..shape.numel()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            ck.records.push((name, Tensor::from_vec(shape, values)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let ck = Checkpoint {
            header: vec![("k".into(), 5.0)],
            records: vec![("w".into(), Tensor::full(Shape::new(1, 2, 1, 1).unwrap(), 1.5))],
        };
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in (1usize..3, 1usize..4, 1usize..4, 1usize..4),
            seed_vals in proptest::collection::vec(any::<f64>(), 48),
            scalar in any::<f64>(),
            name in "[a-z._]{1,12}",
        ) {
            let shape = Shape::new(dims.0, dims.1, dims.2, dims.3).unwrap();
            let values: Vec<f64> = (0..shape.numel()).map(|i| seed_vals[i % seed_vals.len()]).collect();
            let ck = Checkpoint {
                header: vec![("r".into(), scalar)],
                records: vec![(name, Tensor::from_vec(shape, values).unwrap())],
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
