//! Binary checkpoint container.
//!
//! Little-endian: magic `MASSCRF`, `u32` version, `u32` record count, then
//! per record a `u32`-prefixed UTF-8 name, a `u8` dtype tag, a `u32` rank,
//! `u64` dims, and the raw elements.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"MASSCRF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U64(_) => 1,
            Payload::Bytes(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], payload: Payload) {
        debug_assert_eq!(shape.iter().product::<usize>(), payload.len());
        self.records.push(Record { name: name.into(), shape: shape.to_vec(), payload });
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        self.push(name, shape, Payload::F64(data.to_vec()));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, data: &[u64]) {
        self.push(name, &[data.len()], Payload::U64(data.to_vec()));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, data: &[u8]) {
        self.push(name, &[data.len()], Payload::Bytes(data.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(Record { shape, payload: Payload::F64(v), .. }) => Ok((shape, v)),
            Some(_) => Err(bad(format!("record `{name}` is not f64"))),
            None => Err(bad(format!("missing record `{name}`"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Record { payload: Payload::U64(v), .. }) => Ok(v),
            Some(_) => Err(bad(format!("record `{name}` is not u64"))),
            None => Err(bad(format!("missing record `{name}`"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Record { payload: Payload::Bytes(v), .. }) => Ok(v),
            Some(_) => Err(bad(format!("record `{name}` is not bytes"))),
            None => Err(bad(format!("missing record `{name}`"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            w.write_all(&[r.payload.tag()])?;
            w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
            for &d in &r.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &r.payload {
                Payload::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                Payload::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                Payload::Bytes(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut name = vec![0u8; read_u32(r)? as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("record name is not UTF-8"))?;
            let mut tag = [0u8];
            r.read_exact(&mut tag)?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = match tag[0] {
                0 => Payload::F64((0..n).map(|_| read_u64(r).map(f64::from_bits)).collect::<Result<_>>()?),
                1 => Payload::U64((0..n).map(|_| read_u64(r)).collect::<Result<_>>()?),
                2 => {
                    let mut v = vec![0u8; n];
                    r.read_exact(&mut v)?;
                    Payload::Bytes(v)
                }
                t => return Err(bad(format!("unknown dtype tag {t} in `{name}`"))),
            };
            records.push(Record { name, shape, payload });
        }
        Ok(Checkpoint { records })
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

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
