//! Named-tensor archive used for checkpoints.
//!
//! Layout (little-endian): magic `ANYAD1\0\0`; u32 entry count; per entry
//! u16 name length, UTF-8 name, u8 dtype code, u8 rank, rank×u64 dims, raw
//! data; then u32 length and the UTF-8 config snapshot.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensorgrad::Tensor;

pub const MAGIC: &[u8; 8] = b"ANYAD1\0\0";

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn dtype(&self) -> DType {
        match self.data {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
            EntryData::I64(_) => DType::I64,
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => EntryData::F32(t.data().iter().map(|v| v.to_f32().expect("f32")).collect()),
            _ => EntryData::F64(t.data().iter().map(|v| v.f64()).collect()),
        };
        Entry {
            dims: t.dims().to_vec(),
            data,
        }
    }

    pub fn f64s(dims: Vec<usize>, data: Vec<f64>) -> Self {
        Entry {
            dims,
            data: EntryData::F64(data),
        }
    }

    pub fn i64s(data: Vec<i64>) -> Self {
        Entry {
            dims: vec![data.len()],
            data: EntryData::I64(data),
        }
    }

    /// Float entry as a tensor of `T`; the stored dtype must match `T`.
    pub fn to_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.data, T::DTYPE) {
            (EntryData::F32(v), DType::F32) => v.iter().map(|&x| T::c(x as f64)).collect(),
            (EntryData::F64(v), DType::F64) => v.iter().map(|&x| T::c(x)).collect(),
            _ => {
                return Err(Error::Contract(format!(
                    "checkpoint entry {name} has dtype {:?}, expected {:?}",
                    self.dtype(),
                    T::DTYPE
                )))
            }
        };
        Tensor::new(self.dims.clone(), data)
    }

    pub fn as_f64(&self, name: &str) -> Result<&[f64]> {
        match &self.data {
            EntryData::F64(v) => Ok(v),
            _ => Err(Error::Contract(format!("checkpoint entry {name} is not f64"))),
        }
    }

    pub fn as_i64(&self, name: &str) -> Result<&[i64]> {
        match &self.data {
            EntryData::I64(v) => Ok(v),
            _ => Err(Error::Contract(format!("checkpoint entry {name} is not i64"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: BTreeMap<String, Entry>,
    pub config: String,
}

impl Archive {
    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks entry {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            if name.len() > u16::MAX as usize || e.dims.len() > u8::MAX as usize {
                return Err(Error::Contract(format!("checkpoint entry {name} too large to encode")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype() as u8);
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::parse(0, "bad checkpoint magic"));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::parse(at, "entry name is not UTF-8"))?
                .to_string();
            let code_at = r.pos as u64;
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::parse(code_at, format!("unknown dtype code in entry {name}")))?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::parse(r.pos as u64, "entry dims overflow"))?;
            let raw = r.take(
                n.checked_mul(dtype.size())
                    .ok_or_else(|| Error::parse(r.pos as u64, "entry too large"))?,
            )?;
            let data = match dtype {
                DType::F32 => EntryData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => EntryData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::I64 => EntryData::I64(
                    raw.chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            if entries.insert(name.clone(), Entry { dims, data }).is_some() {
                return Err(Error::parse(at, format!("duplicate entry {name}")));
            }
        }
        let at = r.pos as u64;
        let len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(at, "config snapshot is not UTF-8"))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos as u64, "trailing bytes after config snapshot"));
        }
        Ok(Archive { entries, config })
    }

    /// Writes through a temporary sibling file and renames on success.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write-to-temp then rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive {
            config: "seed = 1\n".into(),
            ..Default::default()
        };
        a.insert(
            "w",
            Entry::from_tensor(&Tensor::<f32>::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap()),
        );
        a.insert("ref.en1.mean", Entry::f64s(vec![3], vec![0.1, 0.2, 0.3]));
        a.insert("step", Entry::i64s(vec![42]));
        a
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_a_parse_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            match Archive::from_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::Parse { offset: 0, .. })
        ));
    }
}
