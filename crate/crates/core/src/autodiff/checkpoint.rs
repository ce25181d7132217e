//! `SBUF1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"SBUF1"
//! count   u32
//! record* name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64, 2 = u8),
//!         ndim u32, dims u64 × ndim, data (product(dims) elements)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"SBUF1";

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl RecordData {
    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn format_err(what: impl Into<String>) -> Error {
    Error::Format(what.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| format_err(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: RecordData::F64(t.data().to_vec()),
        });
    }

    pub fn push_tensors(&mut self, prefix: &str, names: &[String], ts: &[Tensor]) {
        for (n, t) in names.iter().zip(ts) {
            self.push_tensor(format!("{prefix}/{n}"), t);
        }
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.records.push(Record {
            name: name.into(),
            shape: vec![bytes.len()],
            data: RecordData::U8(bytes.to_vec()),
        });
    }

    pub fn find(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self.find(name).ok_or_else(|| format_err(format!("checkpoint has no record {name:?}")))?;
        let data = match &r.data {
            RecordData::F64(v) => v.clone(),
            RecordData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RecordData::U8(_) => return Err(format_err(format!("record {name:?} is not numeric"))),
        };
        Tensor::new(r.shape.clone(), data)
    }

    pub fn tensors(&self, prefix: &str, names: &[String]) -> Result<Vec<Tensor>> {
        names.iter().map(|n| self.tensor(&format!("{prefix}/{n}"))).collect()
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.find(name).map(|r| &r.data) {
            Some(RecordData::U8(v)) => Ok(v),
            Some(_) => Err(format_err(format!("record {name:?} is not a byte record"))),
            None => Err(format_err(format!("checkpoint has no record {name:?}"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            let dtype: u8 = match r.data {
                RecordData::F32(_) => 0,
                RecordData::F64(_) => 1,
                RecordData::U8(_) => 2,
            };
            w.write_all(&[dtype])?;
            w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
            for &d in &r.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &r.data {
                RecordData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                RecordData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                RecordData::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic: [u8; 5] = read_exact(r)?;
        if &magic != MAGIC {
            return Err(format_err("not an SBUF1 checkpoint"));
        }
        let count = read_u32(r)?;
        let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| format_err(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| format_err("record name is not utf-8"))?;
            let [dtype] = read_exact::<1>(r)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => RecordData::F32((0..n).map(|_| read_exact(r).map(f32::from_le_bytes)).collect::<Result<_>>()?),
                1 => RecordData::F64((0..n).map(|_| read_exact(r).map(f64::from_le_bytes)).collect::<Result<_>>()?),
                2 => {
                    let mut v = vec![0u8; n];
                    r.read_exact(&mut v).map_err(|e| format_err(format!("truncated data: {e}")))?;
                    RecordData::U8(v)
                }
                d => return Err(format_err(format!("unknown dtype {d} in record {name:?}"))),
            };
            debug_assert_eq!(data.len(), n);
            records.push(Record { name, shape, data });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut ck = Checkpoint::new();
        ck.push_tensor("gen/w", &Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap());
        ck.push_bytes("meta/config", b"seed = 3\n");
        ck.records.push(Record { name: "x".into(), shape: vec![2], data: RecordData::F32(vec![0.5, -1.5]) });
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"SBUF1");
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.tensor("x").unwrap().data(), &[0.5, -1.5]);
        assert_eq!(back.bytes("meta/config").unwrap(), b"seed = 3\n");
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&mut &b"SBUF2\0\0\0\0"[..]).is_err());
        let mut ck = Checkpoint::new();
        ck.push_tensor("a", &Tensor::vector(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
