//! Named-tensor container used for model weights and training state.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "GVTENSOR"
//! version  u32       FORMAT_VERSION
//! count    u32       number of records
//! record*  count times, sorted by name (byte order):
//!   name_len u32, name (UTF-8, name_len bytes)
//!   kind     u8      0 = f64 tensor, 1 = u64 array, 2 = byte string
//!   rank     u32     1 for byte strings
//!   dims     u64 * rank
//!   payload  product(dims) elements: f64 (IEEE-754 bits), u64, or u8
//! ```
//!
//! Records are kept in a `BTreeMap`, so writing the same contents always
//! produces the same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GVTENSOR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, values: Vec<u64> },
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub records: BTreeMap<String, Record>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.insert(name.into(), Record::F64(t.cast()));
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        self.records.insert(
            name.into(),
            Record::U64 {
                shape: vec![values.len()],
                values: values.to_vec(),
            },
        );
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.records.insert(name.into(), Record::Bytes(bytes.to_vec()));
    }

    pub fn bytes(&self, name: &str) -> Option<&[u8]> {
        match self.records.get(name) {
            Some(Record::Bytes(b)) => Some(b),
            _ => None,
        }
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        match self.records.get(name) {
            Some(Record::F64(t)) => Some(t.cast()),
            _ => None,
        }
    }

    pub fn u64s(&self, name: &str) -> Option<&[u64]> {
        match self.records.get(name) {
            Some(Record::U64 { values, .. }) => Some(values),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let len;
            let (kind, shape) = match rec {
                Record::F64(t) => (0u8, t.shape()),
                Record::U64 { shape, .. } => (1u8, shape.as_slice()),
                Record::Bytes(b) => {
                    len = [b.len()];
                    (2u8, &len[..])
                }
            };
            out.push(kind);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match rec {
                Record::F64(t) => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::U64 { values, .. } => {
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| format_err(path, "truncated header"))?;
        if &magic != MAGIC {
            return Err(format_err(path, "bad magic"));
        }
        let version = read_u32(&mut r, path)?;
        if version != FORMAT_VERSION {
            return Err(format_err(path, format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, path)?;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r, path)? as usize;
            let name = take(&mut r, len, path)?;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| format_err(path, "record name is not UTF-8"))?;
            let kind = take(&mut r, 1, path)?[0];
            let rank = read_u32(&mut r, path)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r, path)? as usize);
            }
            let n: usize = shape.iter().product();
            if kind == 2 {
                if rank != 1 {
                    return Err(format_err(path, format!("byte record {name} has rank {rank}")));
                }
                let rec = Record::Bytes(take(&mut r, n, path)?.to_vec());
                if records.insert(name.clone(), rec).is_some() {
                    return Err(format_err(path, format!("duplicate record {name}")));
                }
                continue;
            }
            let payload = take(&mut r, n * 8, path)?;
            let words = payload.chunks_exact(8).map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                b
            });
            let rec = match kind {
                0 => Record::F64(Tensor::new(&shape, words.map(f64::from_le_bytes).collect())?),
                1 => Record::U64 {
                    shape,
                    values: words.map(u64::from_le_bytes).collect(),
                },
                k => return Err(format_err(path, format!("unknown record kind {k}"))),
            };
            if records.insert(name.clone(), rec).is_some() {
                return Err(format_err(path, format!("duplicate record {name}")));
            }
        }
        if !r.is_empty() {
            return Err(format_err(path, "trailing bytes"));
        }
        Ok(Container { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(format_err(path, "truncated record"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8], path: &Path) -> Result<u32> {
    let b = take(r, 4, path)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_u64(r: &mut &[u8], path: &Path) -> Result<u64> {
    let b = take(r, 8, path)?;
    let mut a = [0u8; 8];
    a.copy_from_slice(b);
    Ok(u64::from_le_bytes(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut c = Container::new();
        c.insert_tensor("w", &Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"GVTENSOR");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(b[20], b'w');
        assert_eq!(b[21], 0);
        assert_eq!(&b[22..26], &1u32.to_le_bytes());
        assert_eq!(&b[26..34], &2u64.to_le_bytes());
        assert_eq!(&b[34..42], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 50);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.insert_u64("step", &[7]);
        let b = c.to_bytes();
        let p = Path::new("x.ckpt");
        assert!(Container::from_bytes(&b[..b.len() - 1], p).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad, p).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(Container::from_bytes(&long, p).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            values in prop::collection::vec(prop::num::f64::ANY, 0..20),
            ints in prop::collection::vec(any::<u64>(), 0..5),
        ) {
            let mut c = Container::new();
            c.insert_tensor("a.b", &Tensor::<f64>::new(&[values.len()], values.clone()).unwrap());
            c.insert_u64("meta", &ints);
            c.insert_bytes("text", &ints.iter().map(|&v| v as u8).collect::<Vec<_>>());
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
