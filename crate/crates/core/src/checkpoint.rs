//! Flat binary archive of named `f32` tensors.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "HSTTN1" | count | count × ( name_len | name bytes | rank | dims.. | f32 data.. )
//! ```
//!
//! The same container stores model parameters, cached windows and
//! attention dumps.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"HSTTN1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic header")]
    BadMagic,
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub records: Vec<(String, Tensor)>,
}

fn write_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<usize, ArchiveError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| ArchiveError::Corrupt(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, self.records.len())?;
        for (name, t) in &self.records {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ArchiveError> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| ArchiveError::BadMagic)?;
        if &magic != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let count = read_u32(r)?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u32(r)?;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| ArchiveError::Corrupt(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name)
                .map_err(|_| ArchiveError::Corrupt("name is not UTF-8".into()))?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)
                .map_err(|e| ArchiveError::Corrupt(format!("truncated data for {name}: {e}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| ArchiveError::Corrupt(e.to_string()))?;
            records.push((name, t));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn from_params(store: &ParamStore) -> Self {
        Self {
            records: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copies values into `store`, requiring the exact same names, order
    /// and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), ArchiveError> {
        if self.records.len() != store.len() {
            return Err(ArchiveError::Mismatch(format!(
                "{} records, model has {} parameters",
                self.records.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((name, t), id) in self.records.iter().zip(ids) {
            if store.name(id) != name {
                return Err(ArchiveError::Mismatch(format!(
                    "expected {}, found {name}",
                    store.name(id)
                )));
            }
            if store.get(id).shape() != t.shape() {
                return Err(ArchiveError::Mismatch(format!(
                    "{name}: shape {:?} vs model {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut a = Archive::new();
        a.push("w", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap());
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..6], b"HSTTN1");
        assert_eq!(&bytes[6..10], &1u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(bytes[14], b'w');
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Archive::read_from(&mut &b"HSTTN2\0\0\0\0"[..]),
            Err(ArchiveError::BadMagic)
        ));
        let mut a = Archive::new();
        a.push("x", Tensor::zeros(&[3]));
        let bytes = a.to_bytes();
        assert!(matches!(
            Archive::read_from(&mut &bytes[..bytes.len() - 1]),
            Err(ArchiveError::Corrupt(_))
        ));
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2, 2]));
        let mut wrong_shape = Archive::new();
        wrong_shape.push("a", Tensor::zeros(&[4]));
        assert!(matches!(wrong_shape.load_into(&mut store), Err(ArchiveError::Mismatch(_))));
        let mut wrong_name = Archive::new();
        wrong_name.push("b", Tensor::zeros(&[2, 2]));
        assert!(matches!(wrong_name.load_into(&mut store), Err(ArchiveError::Mismatch(_))));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40), name in "[a-z/0-9]{1,12}") {
            let t = Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let mut a = Archive::new();
            a.push(name, t);
            let back = Archive::read_from(&mut a.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
